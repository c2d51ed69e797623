use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::mat::{dot, norm, Mat};
use crate::error::{Error, Result};

/// Vectors shorter than this cannot be normalized.
pub const EPS_NORM: f64 = 1e-8;
/// Regularizer in the denominator of the orthogonal projection. Shared by the
/// plain projection and the stop-gradient projection used by the regularizer.
pub const EPS_PROJ: f64 = 1e-8;
/// Tolerance for the `unit` tag.
pub const UNIT_TOL: f64 = 1e-9;

/// A d-dimensional embedding, optionally tagged as lying on the unit sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    values: Vec<f64>,
    unit: bool,
}

impl Embedding {
    /// Wraps raw values without any normalization claim.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidSpec("embedding dimension must be at least 2".into()));
        }
        Ok(Embedding { values, unit: false })
    }

    /// Wraps values that are already unit length; fails if they are not.
    pub fn unit(values: Vec<f64>) -> Result<Self> {
        let n = norm(&values);
        if libm::fabs(n - 1.0) > UNIT_TOL {
            return Err(Error::DegenerateVector { norm: n });
        }
        let mut e = Embedding::new(values)?;
        e.unit = true;
        Ok(e)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_unit(&self) -> bool {
        self.unit
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

/// Scales `x` onto the unit sphere. Vectors with norm below `eps_norm` are rejected.
pub fn normalize(x: &[f64], eps_norm: f64) -> Result<Embedding> {
    let n = norm(x);
    if !(n >= eps_norm) {
        return Err(Error::DegenerateVector { norm: n });
    }
    Ok(Embedding { values: x.iter().map(|v| v / n).collect(), unit: true })
}

/// Cosine similarity with internal normalization.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    let nu = norm(u);
    let nv = norm(v);
    if !(nu >= EPS_NORM) {
        return Err(Error::DegenerateVector { norm: nu });
    }
    if !(nv >= EPS_NORM) {
        return Err(Error::DegenerateVector { norm: nv });
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// `(I - v vᵀ / (‖v‖² + eps)) x`.
pub fn project_orthogonal(v: &[f64], x: &[f64], eps: f64) -> Vec<f64> {
    let k = dot(v, x) / (dot(v, v) + eps);
    x.iter().zip(v).map(|(xi, vi)| xi - k * vi).collect()
}

/// Normalizes each row of `m` in place.
pub fn normalize_rows(m: &mut Mat, eps_norm: f64) -> Result<()> {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let n = norm(row);
        if !(n >= eps_norm) {
            return Err(Error::DegenerateVector { norm: n });
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(())
}

/// Cosine similarity of every row of `a` against every row of `b`.
pub fn cosine_matrix(a: &Mat, b: &Mat) -> Result<Mat> {
    let mut an = a.clone();
    let mut bn = b.clone();
    normalize_rows(&mut an, EPS_NORM)?;
    normalize_rows(&mut bn, EPS_NORM)?;
    Ok(an.matmul_t(&bn))
}
