use crate::diffmath::gradcheck::max_relative_error_all;
use crate::diffmath::Mat;
use crate::rng;

pub(crate) fn random_mat(r: &mut rng::SeededRng, rows: usize, cols: usize, std: f64) -> Mat {
    rng::gaussian_mat(r, rows, cols, std)
}

#[track_caller]
pub(crate) fn assert_grad_matches(x: &Mat, analytic: &Mat, tol: f64, f: impl FnMut(&Mat) -> f64) {
    let err = max_relative_error_all(x, analytic, f);
    assert!(err <= tol, "gradient mismatch: relative error {err:e} > {tol:e}");
}
