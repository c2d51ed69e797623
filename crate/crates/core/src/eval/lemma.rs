//! Random-instance check of the matrix inequality behind the first-order
//! result: for `y ≠ 0` and `x ⟂ y`,
//! `xᵀAᵀAy ≥ −√(κ(AᵀA) − 1) · ‖Ay‖² · ‖x‖ / ‖y‖`.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{self, SeededRng};

/// Margins below this count as violations.
const LEMMA_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaRecord {
    pub trial: usize,
    pub dim: usize,
    pub kappa: f64,
    /// `true` for the worst-case `x`, `false` for a random `x ⟂ y`.
    pub adversarial: bool,
    pub lhs: f64,
    pub rhs: f64,
    /// `(lhs − rhs) / (‖Ay‖²‖x‖/‖y‖)`.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub records: Vec<LemmaRecord>,
    pub violations: usize,
    pub worst_margin: f64,
    /// Instances of `‖(I − vvᵀ/(‖v‖²+ε))x‖ > ‖x‖`.
    pub projection_violations: usize,
    pub passed: bool,
}

fn gaussian_vec(r: &mut SeededRng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng::gaussian(r))
}

/// A square matrix with columns rescaled over several orders of magnitude so
/// that condition numbers vary widely.
fn random_matrix(r: &mut SeededRng, n: usize) -> DMatrix<f64> {
    let spread = r.random_range(0.0..3.0);
    let scales: Vec<f64> = (0..n).map(|_| libm::exp(spread * rng::gaussian(r))).collect();
    DMatrix::from_fn(n, n, |_, j| rng::gaussian(r) * scales[j])
}

/// Condition number of a symmetric positive semi-definite matrix.
pub(crate) fn condition_number(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn record(
    trial: usize,
    a: &DMatrix<f64>,
    kappa: f64,
    x: &DVector<f64>,
    y: &DVector<f64>,
    adversarial: bool,
) -> LemmaRecord {
    let ay = a * y;
    let scale = ay.norm_squared() * x.norm() / y.norm();
    let lhs = (a * x).dot(&ay);
    let rhs = -libm::sqrt((kappa - 1.0).max(0.0)) * scale;
    let margin = if scale > 0.0 { (lhs - rhs) / scale } else { 0.0 };
    LemmaRecord { trial, dim: y.len(), kappa, adversarial, lhs, rhs, margin }
}

/// Runs `trials` instances per dimension, each with a random `x ⟂ y` and the
/// worst-case `x = −(I − ŷŷᵀ)AᵀAy`, and checks the norm bound of the
/// orthogonal projection on random vectors.
pub fn verify_lemma1(trials: usize, dims: &[usize], seed: u64) -> LemmaReport {
    let mut r = rng::seeded(seed);
    let mut records = Vec::new();
    let mut projection_violations = 0;
    for &n in dims {
        assert!(n >= 2, "dimension must be at least 2");
        for trial in 0..trials {
            let a = random_matrix(&mut r, n);
            let m = a.transpose() * &a;
            let kappa = condition_number(&m);
            let y = gaussian_vec(&mut r, n);
            let yhat = &y / y.norm();
            let raw = gaussian_vec(&mut r, n);
            let x = &raw - &yhat * yhat.dot(&raw);
            records.push(record(trial, &a, kappa, &x, &y, false));
            let my = &m * &y;
            let worst = -(&my - &yhat * yhat.dot(&my));
            if worst.norm() > 0.0 {
                records.push(record(trial, &a, kappa, &worst, &y, true));
            }

            let v = gaussian_vec(&mut r, n).scale(libm::exp(2.0 * rng::gaussian(&mut r)));
            let p = gaussian_vec(&mut r, n);
            let projected = crate::diffmath::project_orthogonal(v.as_slice(), p.as_slice(), crate::diffmath::EPS_PROJ);
            if crate::diffmath::norm(&projected) > p.norm() * (1.0 + 1e-12) {
                projection_violations += 1;
            }
        }
    }
    let worst_margin = records.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min);
    let violations = records.iter().filter(|r| r.margin < -LEMMA_TOL).count();
    LemmaReport {
        passed: violations == 0 && projection_violations == 0,
        records,
        violations,
        worst_margin,
        projection_violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_gives_equality() {
        let a = DMatrix::<f64>::identity(4, 4);
        let y = DVector::from_vec(alloc::vec![1.0, 2.0, 0.0, 0.0]);
        let x = DVector::from_vec(alloc::vec![2.0, -1.0, 3.0, 0.0]);
        let rec = record(0, &a, condition_number(&(a.transpose() * &a)), &x, &y, false);
        assert!((rec.kappa - 1.0).abs() < 1e-12);
        assert_eq!(rec.lhs, 0.0);
        assert_eq!(rec.rhs, 0.0);
    }

    #[test]
    fn scaling_the_matrix_keeps_the_margin() {
        let mut r = rng::seeded(3);
        for _ in 0..20 {
            let a = random_matrix(&mut r, 5);
            let y = gaussian_vec(&mut r, 5);
            let yhat = &y / y.norm();
            let raw = gaussian_vec(&mut r, 5);
            let x = &raw - &yhat * yhat.dot(&raw);
            let k = condition_number(&(a.transpose() * &a));
            let a3 = &a * 3.0;
            let k3 = condition_number(&(a3.transpose() * &a3));
            let r1 = record(0, &a, k, &x, &y, false);
            let r3 = record(0, &a3, k3, &x, &y, false);
            assert!((r3.lhs - 9.0 * r1.lhs).abs() <= 1e-9 * r1.lhs.abs().max(1.0));
            assert!((r3.margin - r1.margin).abs() < 1e-6 * r1.margin.abs().max(1.0));
            assert_eq!(r1.margin >= -LEMMA_TOL, r3.margin >= -LEMMA_TOL);
        }
    }

    #[test]
    fn random_instances_in_dimension_eight() {
        let rep = verify_lemma1(1000, &[8], 7);
        assert!(rep.passed, "worst margin {}", rep.worst_margin);
        assert!(rep.records.len() >= 1000);
    }

    #[test]
    fn the_adversarial_direction_is_the_minimizer() {
        // over unit x ⟂ y the minimum of xᵀMy is −‖(I − ŷŷᵀ)My‖
        let mut r = rng::seeded(9);
        let a = random_matrix(&mut r, 4);
        let m = a.transpose() * &a;
        let y = gaussian_vec(&mut r, 4);
        let yhat = &y / y.norm();
        let my = &m * &y;
        let perp = &my - &yhat * yhat.dot(&my);
        let best = -perp.norm();
        for _ in 0..2000 {
            let raw = gaussian_vec(&mut r, 4);
            let x = &raw - &yhat * yhat.dot(&raw);
            let x = &x / x.norm();
            assert!(x.dot(&my) >= best - 1e-9);
        }
    }
}
