//! Per-sample check that the proxy-alignment gradient does not oppose
//! anchor alignment to first order.
//!
//! For sample `i` with encoder output `x_i`, anchor `c_i` and parameters `Θ`:
//!
//! * `a = ∇_Θ(−cᵢᵀxᵢ/τ)` is the anchor-alignment gradient,
//! * `o = J_iᵀ ∂L^osr/∂x_i` is the part of the regularizer gradient that
//!   reaches `Θ` through `x_i`,
//! * the bound is `‖c̄_i‖ / ‖∂L^osr/∂T(x_i)‖`,
//!
//! and the checked quantity is `(a + λ o)ᵀ a`.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::gradcheck::{central_difference, relative_error, FD_STEP};
use crate::diffmath::{dot, Gradients, Mat, Tape, Var};
use crate::error::Result;
use crate::losses::{anchor_directions, lambda_bound, osr_on, osr_with_dirs_on, LambdaBound, ProxyAlignMode};
use crate::rng;
use crate::train::{Encoder, Mlp};

/// Per-sample ingredients; the inner product is affine in `λ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTheorem {
    pub sample: usize,
    /// `None` when the regularizer gradient vanishes (any `λ` admissible).
    pub bound: Option<f64>,
    /// `‖a‖²`.
    pub align_sq: f64,
    /// `oᵀa`.
    pub cross: f64,
    /// `|c̄_iᵀ ∂L^osr/∂x_i|`.
    pub proxy_grad_alignment: f64,
}

impl SampleTheorem {
    pub fn inner_product(&self, lambda: f64) -> f64 {
        self.align_sq + lambda * self.cross
    }

    /// `λ ≤ bound`.
    pub fn admits(&self, lambda: f64) -> bool {
        self.bound.is_none_or(|b| lambda <= b)
    }
}

fn flatten(grads: &Gradients, params: &[Var], shapes: &[(usize, usize)]) -> Vec<f64> {
    params.iter().zip(shapes).flat_map(|(&p, &s)| grads.get_or_zeros(p, s).into_vec()).collect()
}

/// Evaluates the per-sample quantities for every sample whose direction and
/// projection are non-degenerate.
pub fn theorem_samples(
    e: &Encoder,
    obs: &Mat,
    anchors: &Mat,
    proxies: &Mat,
    tau: f64,
    eps: f64,
    mode: ProxyAlignMode,
) -> Result<Vec<SampleTheorem>> {
    let mut tape = Tape::new();
    let input = tape.constant(obs.clone());
    let vars = e.mlp.forward_on(&mut tape, input, true)?;
    let xb = vars.output;
    let x = tape.value(xb).clone();
    let shapes: Vec<(usize, usize)> = e.mlp.params().iter().map(|p| p.shape()).collect();
    let osr = osr_on(&mut tape, xb, proxies, anchors, tau, eps, mode)?;
    let g = tape.backward(osr.loss)?;
    let gx = g.get_or_zeros(xb, x.shape());
    let gt = g.get_or_zeros(osr.projected, x.shape());
    let (dirs, valid) = anchor_directions(&x, anchors, tau)?;

    let mut out = Vec::new();
    for i in 0..x.rows() {
        if !osr.active[i] || !valid[i] {
            continue;
        }
        let bound = match lambda_bound(dirs.row(i), gt.row(i))? {
            LambdaBound::Finite(b) => Some(b),
            LambdaBound::Infinite => None,
        };
        let mut seed_a = Mat::zeros(x.rows(), x.cols());
        seed_a.row_mut(i).iter_mut().zip(anchors.row(i)).for_each(|(s, c)| *s = -c / tau);
        let a = flatten(&tape.backward_with(xb, seed_a)?, &vars.params, &shapes);
        let mut seed_o = Mat::zeros(x.rows(), x.cols());
        seed_o.row_mut(i).copy_from_slice(gx.row(i));
        let o = flatten(&tape.backward_with(xb, seed_o)?, &vars.params, &shapes);
        out.push(SampleTheorem {
            sample: i,
            bound,
            align_sq: dot(&a, &a),
            cross: dot(&o, &a),
            proxy_grad_alignment: libm::fabs(dot(dirs.row(i), gx.row(i))),
        });
    }
    Ok(out)
}

/// A `λ` to test: a fixed value or each sample's own bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaChoice {
    Fixed(f64),
    AtBound,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoremBatch {
    pub obs: Mat,
    pub anchors: Mat,
    pub proxies: Mat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremSettings {
    pub tau: f64,
    pub eps: f64,
    pub mode: ProxyAlignMode,
    /// Inner products down to `−tolerance` count as non-negative.
    pub tolerance: f64,
    /// Parameter coordinates spot-checked by finite differences.
    pub fd_coords: usize,
    pub fd_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremRecord {
    pub sample: usize,
    pub lambda: f64,
    pub bound: Option<f64>,
    pub inner_product: f64,
    /// `inner_product / ‖a‖²`.
    pub relative: f64,
    pub applicable: bool,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub records: Vec<TheoremRecord>,
    pub applicable: usize,
    /// Applicable records with an inner product below `−tolerance`.
    pub violations: usize,
    /// Smallest inner product among applicable records.
    pub worst_inner_product: f64,
    pub worst_relative: f64,
    /// Worst relative error of the spot-checked parameter gradients.
    pub fd_max_rel_error: f64,
}

/// Records `(a + λo)ᵀa` for every sample of the batch and every requested
/// `λ`, and spot-checks the analytic parameter gradients by central differences.
pub fn verify_theorem1(
    e: &Encoder,
    batch: &TheoremBatch,
    grid: &[LambdaChoice],
    s: &TheoremSettings,
) -> Result<TheoremReport> {
    let samples = theorem_samples(e, &batch.obs, &batch.anchors, &batch.proxies, s.tau, s.eps, s.mode)?;
    let mut records = Vec::new();
    for st in &samples {
        for choice in grid {
            let lambda = match (choice, st.bound) {
                (LambdaChoice::Fixed(l), _) => *l,
                (LambdaChoice::AtBound, Some(b)) => b,
                (LambdaChoice::AtBound, None) => continue,
            };
            let ip = st.inner_product(lambda);
            records.push(TheoremRecord {
                sample: st.sample,
                lambda,
                bound: st.bound,
                inner_product: ip,
                relative: if st.align_sq > 0.0 { ip / st.align_sq } else { 0.0 },
                applicable: st.admits(lambda),
                satisfied: ip >= -s.tolerance,
            });
        }
    }
    let applicable: Vec<&TheoremRecord> = records.iter().filter(|r| r.applicable).collect();
    let fd_max_rel_error = match samples.first() {
        Some(st) => spot_check(e, batch, st.sample, s)?,
        None => 0.0,
    };
    Ok(TheoremReport {
        applicable: applicable.len(),
        violations: applicable.iter().filter(|r| !r.satisfied).count(),
        worst_inner_product: applicable.iter().map(|r| r.inner_product).fold(f64::INFINITY, f64::min),
        worst_relative: applicable.iter().map(|r| r.relative).fold(f64::INFINITY, f64::min),
        records,
        fd_max_rel_error,
    })
}

/// Compares the analytic `∇_Θ` of the sample's alignment term and of the
/// whole regularizer (directions held fixed) with central differences.
fn spot_check(e: &Encoder, batch: &TheoremBatch, sample: usize, s: &TheoremSettings) -> Result<f64> {
    let mut tape = Tape::new();
    let input = tape.constant(batch.obs.clone());
    let vars = e.mlp.forward_on(&mut tape, input, true)?;
    let x = tape.value(vars.output).clone();
    let osr = osr_on(&mut tape, vars.output, &batch.proxies, &batch.anchors, s.tau, s.eps, s.mode)?;
    let (dirs, active) = (osr.dirs.clone(), osr.active.clone());
    let shapes: Vec<(usize, usize)> = e.mlp.params().iter().map(|p| p.shape()).collect();
    let g_osr = flatten(&tape.backward(osr.loss)?, &vars.params, &shapes);
    let mut seed = Mat::zeros(x.rows(), x.cols());
    seed.row_mut(sample).iter_mut().zip(batch.anchors.row(sample)).for_each(|(v, c)| *v = -c / s.tau);
    let g_align = flatten(&tape.backward_with(vars.output, seed)?, &vars.params, &shapes);

    let flat: Vec<f64> = e.mlp.params().iter().flat_map(|p| p.as_slice().to_vec()).collect();
    let rebuild = |theta: &Mat| -> Mlp {
        let mut m = e.mlp.clone();
        let mut off = 0;
        for p in m.params_mut() {
            let len = p.as_slice().len();
            p.as_mut_slice().copy_from_slice(&theta.as_slice()[off..off + len]);
            off += len;
        }
        m
    };
    let theta = Mat::row_vector(&flat);
    let mut align_fn = |t: &Mat| {
        let y = rebuild(t).forward(&batch.obs).expect("shapes fixed");
        -dot(y.row(sample), batch.anchors.row(sample)) / s.tau
    };
    let mut osr_fn = |t: &Mat| {
        let y = rebuild(t).forward(&batch.obs).expect("shapes fixed");
        let mut tp = Tape::new();
        let yv = tp.constant(y);
        let terms = osr_with_dirs_on(&mut tp, yv, &batch.proxies, &dirs, &active, s.tau, s.eps).expect("active rows");
        tp.scalar(terms.loss)
    };
    let mut r = rng::seeded(s.fd_seed);
    let mut worst: f64 = 0.0;
    for _ in 0..s.fd_coords {
        let k = r.random_range(0..flat.len());
        worst = worst.max(relative_error(g_align[k], central_difference(&theta, k, FD_STEP, &mut align_fn)));
        worst = worst.max(relative_error(g_osr[k], central_difference(&theta, k, FD_STEP, &mut osr_fn)));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::EPS_PROJ;
    use crate::synth::Modality;

    fn snapshot(seed: u64, n: usize) -> (Encoder, TheoremBatch) {
        let mut r = rng::seeded(seed);
        let e = Encoder::new(Modality::B, 12, &[16, 16], 8, &mut r);
        let batch = TheoremBatch {
            obs: rng::gaussian_mat(&mut r, n, 12, 1.0),
            anchors: rng::unit_rows(&mut r, n, 8),
            proxies: rng::unit_rows(&mut r, n, 8),
        };
        (e, batch)
    }

    fn settings(mode: ProxyAlignMode) -> TheoremSettings {
        TheoremSettings { tau: 0.07, eps: EPS_PROJ, mode, tolerance: 1e-8, fd_coords: 32, fd_seed: 1 }
    }

    #[test]
    fn lambda_zero_gives_the_squared_alignment_gradient() {
        let (e, b) = snapshot(1, 6);
        let rep = verify_theorem1(&e, &b, &[LambdaChoice::Fixed(0.0)], &settings(ProxyAlignMode::Osr)).unwrap();
        assert_eq!(rep.records.len(), 6);
        assert!(rep.records.iter().all(|r| r.inner_product > 0.0 && (r.relative - 1.0).abs() < 1e-12));
        assert!(rep.fd_max_rel_error < 1e-5, "{}", rep.fd_max_rel_error);
    }

    #[test]
    fn alignment_gradient_matches_an_explicit_jacobian() {
        // a = J_iᵀ(−c_i/τ), where J_i is the Jacobian of x_i with respect to Θ,
        // assembled column by column from central differences
        let (e, b) = snapshot(2, 4);
        let st = theorem_samples(&e, &b.obs, &b.anchors, &b.proxies, 0.07, EPS_PROJ, ProxyAlignMode::Osr).unwrap();
        let i = st[0].sample;
        let flat: Vec<f64> = e.mlp.params().iter().flat_map(|p| p.as_slice().to_vec()).collect();
        let mut a = Vec::new();
        for k in 0..flat.len() {
            let eval = |h: f64| {
                let mut m = e.mlp.clone();
                let mut off = 0;
                for p in m.params_mut() {
                    let len = p.as_slice().len();
                    if (off..off + len).contains(&k) {
                        p.as_mut_slice()[k - off] += h;
                    }
                    off += len;
                }
                m.forward(&b.obs).unwrap().row(i).to_vec()
            };
            let (p, m) = (eval(1e-6), eval(-1e-6));
            let col: Vec<f64> = p.iter().zip(&m).map(|(u, v)| (u - v) / 2e-6).collect();
            a.push(-dot(&col, b.anchors.row(i)) / 0.07);
        }
        let expected = dot(&a, &a);
        assert!((st[0].align_sq - expected).abs() <= 1e-5 * expected);
    }

    #[test]
    fn osr_removes_alignment_of_the_regularizer_gradient() {
        let (e, b) = snapshot(3, 8);
        let osr = theorem_samples(&e, &b.obs, &b.anchors, &b.proxies, 0.07, EPS_PROJ, ProxyAlignMode::Osr).unwrap();
        let direct =
            theorem_samples(&e, &b.obs, &b.anchors, &b.proxies, 0.07, EPS_PROJ, ProxyAlignMode::Direct).unwrap();
        let a: f64 = osr.iter().map(|s| s.proxy_grad_alignment).sum();
        let d: f64 = direct.iter().map(|s| s.proxy_grad_alignment).sum();
        assert!(d > 1e-3 && a < 1e-8 * d, "{a} {d}");
    }

    #[test]
    fn direct_alignment_with_large_lambda_can_oppose_the_anchor() {
        let found = (0..50).any(|seed| {
            let (e, b) = snapshot(100 + seed, 8);
            let rep = verify_theorem1(&e, &b, &[LambdaChoice::Fixed(10.0)], &settings(ProxyAlignMode::Direct)).unwrap();
            rep.records.iter().any(|r| r.inner_product < 0.0)
        });
        assert!(found);
    }
}
