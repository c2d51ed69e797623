//! Training objectives: InfoNCE and its alignment/log-partition split, the
//! anchor-alignment direction, the orthogonal-subspace regularizer (OSR) and
//! the combined symmetric objective.
//!
//! Similarities are cosine similarities. On tape, every batch is assumed to
//! hold unit rows (encoder outputs are normalized), so `sim(x, y) = xᵀy`.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::diffmath::{cosine_matrix, dot, log_sum_exp, norm, Mat, Tape, Var, EPS_NORM};
use crate::error::{Error, Result};

/// Anchor-alignment directions shorter than this carry no usable direction.
pub const EPS_DIR: f64 = 1e-6;

/// Fixed (never learned) softmax temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureConfig {
    tau: f64,
}

impl TemperatureConfig {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidConfig(alloc::format!("temperature must be positive, got {tau}")));
        }
        Ok(TemperatureConfig { tau })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub const fn fixed_not_learnable(&self) -> bool {
        true
    }
}

/// How proxy alignment is applied in the bridge stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyAlignMode {
    /// InfoNCE on `T_c̄(x)`: projection off the anchor-alignment direction.
    Osr,
    /// Plain InfoNCE between `x` and the proxies (projection removed).
    Direct,
}

/// Per-row InfoNCE losses `-log softmax_i(sim(q_i, k_·)/τ)`.
pub fn info_nce_rows(queries: &Mat, keys: &Mat, tau: f64) -> Result<Vec<f64>> {
    check_pair(queries, keys)?;
    let sims = cosine_matrix(queries, keys)?;
    Ok((0..sims.rows())
        .map(|i| {
            let logits: Vec<f64> = sims.row(i).iter().map(|s| s / tau).collect();
            log_sum_exp(&logits) - logits[i]
        })
        .collect())
}

/// Mean InfoNCE with in-batch negatives; row `i` of `keys` is the positive for row `i` of `queries`.
pub fn info_nce(queries: &Mat, keys: &Mat, tau: f64) -> Result<f64> {
    let rows = info_nce_rows(queries, keys, tau)?;
    Ok(rows.iter().sum::<f64>() / rows.len() as f64)
}

/// Positive-pair alignment term `-sim(x, c)/τ`.
pub fn align_part(x: &[f64], c: &[f64], tau: f64) -> Result<f64> {
    Ok(-crate::diffmath::cosine_sim(x, c)? / tau)
}

/// Log-partition term `log Σ_j exp(sim(x, c_j)/τ)`.
pub fn neg_part(x: &[f64], keys: &Mat, tau: f64) -> Result<f64> {
    let q = Mat::row_vector(x);
    let sims = cosine_matrix(&q, keys)?;
    let logits: Vec<f64> = sims.row(0).iter().map(|s| s / tau).collect();
    Ok(log_sum_exp(&logits))
}

/// `c̄ = (1/τ) ∂sim(x, c)/∂x`, the exact gradient of cosine similarity
/// (normalization Jacobian included). For unit inputs this is `(I - xxᵀ)c/τ`.
pub fn anchor_direction(x: &[f64], c: &[f64], tau: f64) -> Result<Vec<f64>> {
    let nx = norm(x);
    let nc = norm(c);
    if !(nx >= EPS_NORM) {
        return Err(Error::DegenerateVector { norm: nx });
    }
    if !(nc >= EPS_NORM) {
        return Err(Error::DegenerateVector { norm: nc });
    }
    let xc = dot(x, c);
    let dir: Vec<f64> = x.iter().zip(c).map(|(&xi, &ci)| (ci / nc - xc / (nc * nx * nx) * xi) / (nx * tau)).collect();
    let n = norm(&dir);
    if n < EPS_DIR {
        return Err(Error::DegenerateDirection { norm: n });
    }
    Ok(dir)
}

/// Row-wise [`anchor_direction`]. Degenerate rows get a zero direction and a
/// `false` entry in the returned validity mask.
pub fn anchor_directions(x: &Mat, anchors: &Mat, tau: f64) -> Result<(Mat, Vec<bool>)> {
    check_pair(x, anchors)?;
    let mut dirs = Mat::zeros(x.rows(), x.cols());
    let mut valid = vec![false; x.rows()];
    for i in 0..x.rows() {
        match anchor_direction(x.row(i), anchors.row(i), tau) {
            Ok(d) => {
                dirs.row_mut(i).copy_from_slice(&d);
                valid[i] = true;
            }
            Err(Error::DegenerateDirection { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok((dirs, valid))
}

fn check_pair(a: &Mat, b: &Mat) -> Result<()> {
    if a.shape() != b.shape() || a.rows() == 0 {
        return Err(Error::ShapeMismatch { op: "paired batch", expected: a.shape(), found: b.shape() });
    }
    Ok(())
}

/// Mean InfoNCE on tape over unit-row batches (`logits = q kᵀ / τ`).
pub fn info_nce_on(tape: &mut Tape, queries: Var, keys: Var, tau: f64) -> Result<Var> {
    let n = tape.value(queries).rows();
    if tape.value(keys).rows() != n {
        return Err(Error::ShapeMismatch {
            op: "info_nce",
            expected: tape.value(queries).shape(),
            found: tape.value(keys).shape(),
        });
    }
    let logits = tape.matmul_t(queries, keys)?;
    let logits = tape.scale(logits, 1.0 / tau);
    tape.softmax_xent(logits, (0..n).collect(), vec![true; n])
}

/// Symmetric InfoNCE `½(L(a→b) + L(b→a))` on tape.
pub fn symmetric_info_nce_on(tape: &mut Tape, a: Var, b: Var, tau: f64) -> Result<Var> {
    let ab = info_nce_on(tape, a, b, tau)?;
    let ba = info_nce_on(tape, b, a, tau)?;
    let s = tape.add(ab, ba)?;
    Ok(tape.scale(s, 0.5))
}

/// Tape nodes and bookkeeping for one evaluation of the proxy-alignment term.
#[derive(Debug, Clone)]
pub struct OsrTerms {
    /// `½(L(M_b→M_a) + L(M_a→M_b))`, a `1×1` node.
    pub loss: Var,
    /// `L^osr(M_b→M_a)` alone.
    pub forward: Var,
    /// `T_c̄(x)` rows (or `x` itself in [`ProxyAlignMode::Direct`]).
    pub projected: Var,
    /// Anchor-alignment directions `c̄_i` (zero for skipped rows).
    pub dirs: Mat,
    /// Rows that contribute to the mean.
    pub active: Vec<bool>,
    pub skipped: usize,
}

/// Proxy alignment of `xb` (unit rows, on tape) to the constant proxies
/// `xa_hat`.
///
/// In [`ProxyAlignMode::Osr`], each query is `T_c̄(x_i) = normalize((I - c̄c̄ᵀ/(‖c̄‖²+ε)) x_i)`
/// with `c̄_i` computed from the current values and held constant (stop-gradient);
/// rows whose direction or projection is degenerate are excluded from the mean.
/// Negatives are the in-batch proxies only. The reverse direction swaps the
/// softmax roles (proxy queries, projected keys) while the projection stays on `xb`.
pub fn osr_on(
    tape: &mut Tape,
    xb: Var,
    xa_hat: &Mat,
    anchors: &Mat,
    tau: f64,
    eps: f64,
    mode: ProxyAlignMode,
) -> Result<OsrTerms> {
    let xv = tape.value(xb).clone();
    check_pair(&xv, xa_hat)?;
    check_pair(&xv, anchors)?;
    let n = xv.rows();
    let (projected, dirs, active) = match mode {
        ProxyAlignMode::Direct => (xb, Mat::zeros(n, xv.cols()), vec![true; n]),
        ProxyAlignMode::Osr => {
            let (mut dirs, mut active) = anchor_directions(&xv, anchors, tau)?;
            for i in 0..n {
                let v = dirs.row(i);
                let k = dot(v, xv.row(i)) / (dot(v, v) + eps);
                let p: Vec<f64> = xv.row(i).iter().zip(v).map(|(x, d)| x - k * d).collect();
                if norm(&p) < EPS_NORM {
                    dirs.row_mut(i).iter_mut().for_each(|d| *d = 0.0);
                    active[i] = false;
                }
            }
            let stopped = dirs.clone();
            let p = tape.project_rows(xb, stopped, eps)?;
            (tape.row_normalize(p, EPS_NORM)?, dirs, active)
        }
    };
    osr_finish(tape, projected, xa_hat, dirs, active, tau)
}

/// [`osr_on`] with the directions supplied instead of read off the current
/// values. Rows with `active[i] == false` are left out of the mean; their
/// direction must be zero.
pub fn osr_with_dirs_on(
    tape: &mut Tape,
    xb: Var,
    xa_hat: &Mat,
    dirs: &Mat,
    active: &[bool],
    tau: f64,
    eps: f64,
) -> Result<OsrTerms> {
    check_pair(tape.value(xb), xa_hat)?;
    let p = tape.project_rows(xb, dirs.clone(), eps)?;
    let projected = tape.row_normalize(p, EPS_NORM)?;
    osr_finish(tape, projected, xa_hat, dirs.clone(), active.to_vec(), tau)
}

fn osr_finish(
    tape: &mut Tape,
    projected: Var,
    xa_hat: &Mat,
    dirs: Mat,
    active: Vec<bool>,
    tau: f64,
) -> Result<OsrTerms> {
    let n = active.len();
    let skipped = active.iter().filter(|a| !**a).count();
    if skipped == n {
        return Err(Error::AllSamplesDegenerate);
    }
    let keys = tape.constant(xa_hat.clone());
    let targets: Vec<usize> = (0..n).collect();
    let fwd = tape.matmul_t(projected, keys)?;
    let fwd = tape.scale(fwd, 1.0 / tau);
    let forward = tape.softmax_xent(fwd, targets.clone(), active.clone())?;
    let rev = tape.matmul_t(keys, projected)?;
    let rev = tape.scale(rev, 1.0 / tau);
    let reverse = tape.softmax_xent(rev, targets, active.clone())?;
    let sum = tape.add(forward, reverse)?;
    let loss = tape.scale(sum, 0.5);
    Ok(OsrTerms { loss, forward, projected, dirs, active, skipped })
}

/// One-directional OSR value `L^osr(M_b→M_a)` for unit-row batches.
pub fn osr_loss(xb: &Mat, xa_hat: &Mat, anchors: &Mat, tau: f64, eps: f64) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let x = tape.constant(xb.clone());
    let t = osr_on(&mut tape, x, xa_hat, anchors, tau, eps, ProxyAlignMode::Osr)?;
    Ok((tape.scalar(t.forward), t.skipped))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub infonce_component: f64,
    pub osr_component: f64,
    pub lambda: f64,
    /// `-sim(x_i, c_i)/τ` for the `M_b→C` direction.
    pub per_sample_align: Vec<f64>,
    /// `log Σ_j exp(sim(x_i, c_j)/τ)` for the `M_b→C` direction.
    pub per_sample_neg: Vec<f64>,
    pub skipped_samples: usize,
}

#[derive(Debug, Clone)]
pub struct CombinedLoss {
    pub total: Var,
    pub report: LossReport,
    pub osr: Option<OsrTerms>,
}

/// `½(InfoNCE(M_b→C) + InfoNCE(C→M_b)) + λ·½(L^osr(M_b→M_a) + L^osr(M_a→M_b))`.
///
/// With `λ = 0` the proxy term is still evaluated for reporting but is not
/// attached to `total`.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss(
    tape: &mut Tape,
    xb: Var,
    anchors: &Mat,
    xa_hat: &Mat,
    lambda: f64,
    tau: f64,
    eps: f64,
    mode: ProxyAlignMode,
) -> Result<CombinedLoss> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidConfig(alloc::format!("lambda must be non-negative, got {lambda}")));
    }
    let xv = tape.value(xb).clone();
    check_pair(&xv, anchors)?;
    let c = tape.constant(anchors.clone());
    let infonce = symmetric_info_nce_on(tape, xb, c, tau)?;

    let sims = xv.matmul_t(anchors);
    let mut per_sample_align = Vec::with_capacity(xv.rows());
    let mut per_sample_neg = Vec::with_capacity(xv.rows());
    for i in 0..xv.rows() {
        let logits: Vec<f64> = sims.row(i).iter().map(|s| s / tau).collect();
        per_sample_align.push(-logits[i]);
        per_sample_neg.push(log_sum_exp(&logits));
    }

    let osr = match osr_on(tape, xb, xa_hat, anchors, tau, eps, mode) {
        Ok(t) => Some(t),
        Err(Error::AllSamplesDegenerate) if lambda == 0.0 => None,
        Err(e) => return Err(e),
    };
    let (osr_component, skipped_samples) = match &osr {
        Some(t) => (tape.scalar(t.loss), t.skipped),
        None => (0.0, xv.rows()),
    };
    let total = match (&osr, lambda > 0.0) {
        (Some(t), true) => {
            let w = tape.scale(t.loss, lambda);
            tape.add(infonce, w)?
        }
        _ => infonce,
    };
    let infonce_component = tape.scalar(infonce);
    let report = LossReport {
        total: tape.scalar(total),
        infonce_component,
        osr_component,
        lambda,
        per_sample_align,
        per_sample_neg,
        skipped_samples,
    };
    Ok(CombinedLoss { total, report, osr })
}

/// Largest `λ` for which the combined update is first-order non-adversarial
/// to anchor alignment: `‖c̄‖ / ‖∂L^osr/∂T(x)‖`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaBound {
    Finite(f64),
    /// The regularizer gradient vanishes; any `λ` is admissible.
    Infinite,
}

impl LambdaBound {
    pub fn value(self) -> f64 {
        match self {
            LambdaBound::Finite(v) => v,
            LambdaBound::Infinite => f64::INFINITY,
        }
    }
}

/// Gradients below this norm make the bound infinite.
pub const EPS_GRAD: f64 = 1e-12;

pub fn lambda_bound(c_bar: &[f64], g_t: &[f64]) -> Result<LambdaBound> {
    let nc = norm(c_bar);
    if nc < EPS_DIR {
        return Err(Error::DegenerateDirection { norm: nc });
    }
    let ng = norm(g_t);
    if ng < EPS_GRAD {
        return Ok(LambdaBound::Infinite);
    }
    Ok(LambdaBound::Finite(nc / ng))
}

/// The bound for cosine similarity with unit embeddings and the positive-pair
/// term: the alignment gradient of `cᵀx/τ` is `c/τ` and the OSR positive-pair
/// gradient of `x̂ᵀT/τ` is `x̂/τ`, so the ratio is `‖c‖/‖x̂‖ = 1`.
pub fn cosine_positive_pair_bound(c: &[f64], xa_hat: &[f64], tau: f64) -> Result<LambdaBound> {
    let c_bar: Vec<f64> = c.iter().map(|v| v / tau).collect();
    let g_t: Vec<f64> = xa_hat.iter().map(|v| -v / tau).collect();
    lambda_bound(&c_bar, &g_t)
}
