//! Central finite differences, used to audit the tape.

use super::mat::Mat;

/// Step used for central differences in double precision.
pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-4;

/// `(f(x + h e_k) - f(x - h e_k)) / 2h` for the single coordinate `k`.
pub fn central_difference(x: &Mat, k: usize, h: f64, f: &mut impl FnMut(&Mat) -> f64) -> f64 {
    let mut xp = x.clone();
    xp.as_mut_slice()[k] += h;
    let fp = f(&xp);
    xp.as_mut_slice()[k] -= 2.0 * h;
    let fm = f(&xp);
    (fp - fm) / (2.0 * h)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Worst relative error between `analytic` and central differences of `f`
/// over the listed coordinates of `x`.
pub fn max_relative_error(
    x: &Mat,
    analytic: &Mat,
    coords: impl IntoIterator<Item = usize>,
    mut f: impl FnMut(&Mat) -> f64,
) -> f64 {
    coords
        .into_iter()
        .map(|k| relative_error(analytic.as_slice()[k], central_difference(x, k, FD_STEP, &mut f)))
        .fold(0.0, f64::max)
}

/// Worst relative error over every coordinate of `x`.
pub fn max_relative_error_all(x: &Mat, analytic: &Mat, f: impl FnMut(&Mat) -> f64) -> f64 {
    max_relative_error(x, analytic, 0..x.as_slice().len(), f)
}
