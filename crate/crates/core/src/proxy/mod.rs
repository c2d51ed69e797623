//! Proxy predictors: maps from anchor embeddings to synthesized, unit-norm
//! embeddings of the already-aligned modality.

mod diffusion;
mod memory;

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use diffusion::{
    ddim_sample, diffusion_fit, DiffusionFitConfig, DiffusionFitStats, DiffusionModel, DiffusionSchedule,
    Parameterization, TIME_FEATURES,
};
pub use memory::{memory_proxy, MemoryBank, MemoryDirection};

use crate::diffmath::{cosine_sim, normalize_rows, Embedding, Mat, Tape, EPS_NORM, UNIT_TOL};
use crate::error::{Error, Result};
use crate::rng;
use crate::train::{minibatches, AdamWConfig, Mlp, OptimizerState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyKind {
    Diffusion,
    Mlp,
    Linear,
    Noise,
    Memory,
}

impl ProxyKind {
    pub const ALL: [ProxyKind; 5] =
        [ProxyKind::Diffusion, ProxyKind::Mlp, ProxyKind::Linear, ProxyKind::Noise, ProxyKind::Memory];

    pub fn name(self) -> &'static str {
        match self {
            ProxyKind::Diffusion => "diffusion",
            ProxyKind::Mlp => "mlp",
            ProxyKind::Linear => "linear",
            ProxyKind::Noise => "noise",
            ProxyKind::Memory => "memory",
        }
    }

    pub fn from_name(s: &str) -> Option<ProxyKind> {
        ProxyKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Architecture of a regression predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressorArch {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ProxyPredictor {
    Regressor {
        arch: RegressorArch,
        net: Mlp,
    },
    /// Adds one fixed perturbation `η` to the anchor embedding.
    Noise {
        eta: Vec<f64>,
    },
    Memory(MemoryBank),
    Diffusion(DiffusionModel),
}

/// Training settings shared by the learned predictors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorFitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Hidden widths of the MLP arch; ignored by the linear arch.
    pub hidden: Vec<usize>,
    pub seed: u64,
}

pub(crate) fn check_pairs(conditions: &Mat, targets: &Mat) -> Result<()> {
    if conditions.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    if conditions.shape() != targets.shape() {
        return Err(Error::ShapeMismatch { op: "proxy_fit", expected: conditions.shape(), found: targets.shape() });
    }
    Ok(())
}

/// Minimizes the mean of `‖N(c_i) − x_i‖²` with AdamW. Returns the predictor and
/// its mean training loss over the final epoch.
pub fn fit_regressor(
    conditions: &Mat,
    targets: &Mat,
    arch: RegressorArch,
    cfg: &RegressorFitConfig,
) -> Result<(ProxyPredictor, f64)> {
    check_pairs(conditions, targets)?;
    if conditions.rows() < 2 {
        return Err(Error::EmptyInput);
    }
    let d = conditions.cols();
    let mut r = rng::seeded(cfg.seed);
    let widths: Vec<usize> = match arch {
        RegressorArch::Linear => alloc::vec![d, d],
        RegressorArch::Mlp => core::iter::once(d).chain(cfg.hidden.iter().copied()).chain([d]).collect(),
    };
    let mut net = Mlp::new(&widths, false, &mut r);
    let n = conditions.rows();
    let total = cfg.epochs * minibatches(&mut r, n, cfg.batch_size).len();
    let mut opt = OptimizerState::new(AdamWConfig::new(cfg.lr, cfg.weight_decay, total), &net.params());
    let mut final_loss = f64::NAN;
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for rows in minibatches(&mut r, n, cfg.batch_size) {
            let mut tape = Tape::new();
            let c = tape.constant(conditions.select_rows(&rows));
            let out = net.forward_on(&mut tape, c, true)?;
            let loss = tape.mse(out.output, targets.select_rows(&rows))?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { step, value });
            }
            epoch_loss += value * rows.len() as f64;
            let grads = tape.backward(loss)?;
            let g: Vec<Mat> = out.params.iter().map(|&v| grads.get(v).cloned().expect("param reached")).collect();
            opt.step(&mut net.params_mut(), &g)?;
            step += 1;
        }
        final_loss = epoch_loss / n as f64;
    }
    Ok((ProxyPredictor::Regressor { arch, net }, final_loss))
}

/// The perturbation baseline: `η` has i.i.d. entries of standard deviation `std`.
pub fn fit_noise(embed_dim: usize, std: f64, seed: u64) -> ProxyPredictor {
    let mut r = rng::seeded(seed);
    ProxyPredictor::Noise { eta: rng::gaussian_mat(&mut r, 1, embed_dim, std).into_vec() }
}

/// Stage-2 settings for every predictor kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProxyConfig {
    pub kind: ProxyKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub hidden: Vec<usize>,
    /// Standard deviation of the perturbation baseline.
    pub noise_std: f64,
    /// Retrieval temperature of the memory bank.
    pub memory_tau: f64,
    pub diffusion: DiffusionConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub num_steps: usize,
    pub alpha_bar_start: f64,
    pub alpha_bar_end: f64,
    pub cfg_dropout: f64,
    pub guidance_scale: f64,
    pub parameterization: Parameterization,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: Vec<usize>,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig {
            kind: ProxyKind::Diffusion,
            epochs: 60,
            batch_size: 64,
            lr: 3e-3,
            weight_decay: 0.0,
            hidden: alloc::vec![128, 128],
            noise_std: 1e-3,
            memory_tau: 0.07,
            diffusion: DiffusionConfig::default(),
        }
    }
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            num_steps: 100,
            alpha_bar_start: 0.999,
            alpha_bar_end: 0.01,
            cfg_dropout: 0.05,
            guidance_scale: 1.0,
            parameterization: Parameterization::X0,
            epochs: 150,
            batch_size: 64,
            lr: 2e-3,
            hidden: alloc::vec![128, 128],
        }
    }
}

/// A fitted predictor with its training diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedProxy {
    pub predictor: ProxyPredictor,
    /// Final-epoch training loss; `None` for predictors without training.
    pub final_loss: Option<f64>,
    pub diffusion_stats: Option<DiffusionFitStats>,
}

/// Fits the predictor named by `cfg.kind` on `(c_i, x_i)` pairs.
pub fn fit_proxy(conditions: &Mat, targets: &Mat, cfg: &ProxyConfig, seed: u64) -> Result<FittedProxy> {
    check_pairs(conditions, targets)?;
    let regressor = |arch| {
        let rc = RegressorFitConfig {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            hidden: cfg.hidden.clone(),
            seed,
        };
        fit_regressor(conditions, targets, arch, &rc).map(|(predictor, loss)| FittedProxy {
            predictor,
            final_loss: Some(loss),
            diffusion_stats: None,
        })
    };
    match cfg.kind {
        ProxyKind::Linear => regressor(RegressorArch::Linear),
        ProxyKind::Mlp => regressor(RegressorArch::Mlp),
        ProxyKind::Noise => Ok(FittedProxy {
            predictor: fit_noise(conditions.cols(), cfg.noise_std, seed),
            final_loss: None,
            diffusion_stats: None,
        }),
        ProxyKind::Memory => Ok(FittedProxy {
            predictor: ProxyPredictor::Memory(MemoryBank::new(conditions.clone(), targets.clone(), cfg.memory_tau)?),
            final_loss: None,
            diffusion_stats: None,
        }),
        ProxyKind::Diffusion => {
            let dc = &cfg.diffusion;
            let schedule = DiffusionSchedule::linear(
                dc.num_steps,
                dc.alpha_bar_start,
                dc.alpha_bar_end,
                dc.cfg_dropout,
                dc.guidance_scale,
            )?;
            let fc = DiffusionFitConfig {
                epochs: dc.epochs,
                batch_size: dc.batch_size,
                lr: dc.lr,
                weight_decay: cfg.weight_decay,
                hidden: dc.hidden.clone(),
                seed,
            };
            let (model, stats) = diffusion_fit(conditions, targets, schedule, dc.parameterization, &fc)?;
            Ok(FittedProxy {
                predictor: ProxyPredictor::Diffusion(model),
                final_loss: Some(stats.final_loss),
                diffusion_stats: Some(stats),
            })
        }
    }
}

impl ProxyPredictor {
    pub fn kind(&self) -> ProxyKind {
        match self {
            ProxyPredictor::Regressor { arch: RegressorArch::Linear, .. } => ProxyKind::Linear,
            ProxyPredictor::Regressor { arch: RegressorArch::Mlp, .. } => ProxyKind::Mlp,
            ProxyPredictor::Noise { .. } => ProxyKind::Noise,
            ProxyPredictor::Memory(_) => ProxyKind::Memory,
            ProxyPredictor::Diffusion(_) => ProxyKind::Diffusion,
        }
    }

    pub fn embed_dim(&self) -> usize {
        match self {
            ProxyPredictor::Regressor { net, .. } => net.output_dim(),
            ProxyPredictor::Noise { eta } => eta.len(),
            ProxyPredictor::Memory(bank) => bank.img().cols(),
            ProxyPredictor::Diffusion(m) => m.embed_dim(),
        }
    }

    /// Unit proxies for every anchor row. Diffusion samples use the guidance
    /// scale stored in the schedule.
    pub fn predict_batch(&self, anchors: &Mat) -> Result<Mat> {
        let d = self.embed_dim();
        if anchors.cols() != d {
            return Err(Error::ShapeMismatch { op: "predict", expected: (anchors.rows(), d), found: anchors.shape() });
        }
        match self {
            ProxyPredictor::Regressor { net, .. } => {
                let mut out = net.forward(anchors)?;
                normalize_rows(&mut out, EPS_NORM)?;
                Ok(out)
            }
            ProxyPredictor::Noise { eta } => {
                let mut out = anchors.clone();
                for i in 0..out.rows() {
                    out.row_mut(i).iter_mut().zip(eta).for_each(|(o, e)| *o += e);
                }
                normalize_rows(&mut out, EPS_NORM)?;
                Ok(out)
            }
            ProxyPredictor::Memory(bank) => {
                let rows: Result<Vec<Embedding>> =
                    anchors.iter_rows().map(|c| memory_proxy(bank, c, MemoryDirection::ImgToText)).collect();
                Ok(Mat::from_rows(&rows?))
            }
            ProxyPredictor::Diffusion(m) => m.sample(anchors, m.schedule.guidance_scale),
        }
    }

    pub fn predict(&self, c: &[f64]) -> Result<Embedding> {
        let out = self.predict_batch(&Mat::row_vector(c))?;
        Embedding::unit(out.into_vec())
    }

    /// Named parameter arrays in a fixed order. Scalars are stored as `1×1`.
    pub fn tensors(&self) -> Vec<(String, Mat)> {
        let mut out = Vec::new();
        let mlp = |out: &mut Vec<(String, Mat)>, prefix: &str, net: &Mlp| {
            for (l, (w, b)) in net.weights.iter().zip(&net.biases).enumerate() {
                out.push((alloc::format!("{prefix}w{l}"), w.clone()));
                out.push((alloc::format!("{prefix}b{l}"), b.clone()));
            }
        };
        match self {
            ProxyPredictor::Regressor { net, .. } => mlp(&mut out, "", net),
            ProxyPredictor::Noise { eta } => out.push(("eta".to_string(), Mat::row_vector(eta))),
            ProxyPredictor::Memory(bank) => {
                out.push(("tau".to_string(), Mat::filled(1, 1, bank.tau())));
                out.push(("img".to_string(), bank.img().clone()));
                out.push(("text".to_string(), bank.text().clone()));
            }
            ProxyPredictor::Diffusion(m) => {
                let param = match m.parameterization {
                    Parameterization::X0 => 0.0,
                    Parameterization::Epsilon => 1.0,
                };
                out.push(("parameterization".to_string(), Mat::filled(1, 1, param)));
                out.push(("cfg_dropout".to_string(), Mat::filled(1, 1, m.schedule.cfg_dropout)));
                out.push(("guidance_scale".to_string(), Mat::filled(1, 1, m.schedule.guidance_scale)));
                out.push(("alpha_bar".to_string(), Mat::row_vector(&m.schedule.alpha_bar)));
                out.push(("null_token".to_string(), m.null_token.clone()));
                out.push(("init_state".to_string(), m.init_state.clone()));
                mlp(&mut out, "denoiser.", &m.denoiser);
            }
        }
        out
    }

    /// Inverse of [`ProxyPredictor::tensors`].
    pub fn from_tensors(kind: ProxyKind, tensors: Vec<(String, Mat)>) -> Result<Self> {
        let mut map: alloc::collections::BTreeMap<String, Mat> = tensors.into_iter().collect();
        let mut take =
            |name: &str| map.remove(name).ok_or_else(|| Error::InvalidSpec(alloc::format!("missing tensor {name}")));
        let scalar = |m: Mat| -> Result<f64> {
            if m.shape() != (1, 1) {
                return Err(Error::ShapeMismatch { op: "checkpoint scalar", expected: (1, 1), found: m.shape() });
            }
            Ok(m.as_slice()[0])
        };
        let p = match kind {
            ProxyKind::Linear | ProxyKind::Mlp => {
                let arch = if kind == ProxyKind::Linear { RegressorArch::Linear } else { RegressorArch::Mlp };
                ProxyPredictor::Regressor { arch, net: mlp_from(&mut take, "", false)? }
            }
            ProxyKind::Noise => ProxyPredictor::Noise { eta: take("eta")?.into_vec() },
            ProxyKind::Memory => {
                let tau = scalar(take("tau")?)?;
                ProxyPredictor::Memory(MemoryBank::from_unit_rows(take("img")?, take("text")?, tau)?)
            }
            ProxyKind::Diffusion => {
                let parameterization = if scalar(take("parameterization")?)? == 0.0 {
                    Parameterization::X0
                } else {
                    Parameterization::Epsilon
                };
                let cfg_dropout = scalar(take("cfg_dropout")?)?;
                let guidance_scale = scalar(take("guidance_scale")?)?;
                let alpha_bar = take("alpha_bar")?.into_vec();
                let null_token = take("null_token")?;
                let init_state = take("init_state")?;
                let denoiser = mlp_from(&mut take, "denoiser.", false)?;
                ProxyPredictor::Diffusion(DiffusionModel {
                    schedule: DiffusionSchedule { alpha_bar, cfg_dropout, guidance_scale },
                    parameterization,
                    denoiser,
                    null_token,
                    init_state,
                })
            }
        };
        Ok(p)
    }

    /// SHA-256 over the kind and every parameter bit.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.kind().name().as_bytes());
        for (name, m) in self.tensors() {
            h.update(name.as_bytes());
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for v in m.as_slice() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Rebuilds an [`Mlp`] from tensors named `{prefix}w{l}` / `{prefix}b{l}`.
pub fn mlp_from(take: &mut impl FnMut(&str) -> Result<Mat>, prefix: &str, normalize_output: bool) -> Result<Mlp> {
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    loop {
        let l = weights.len();
        let Ok(w) = take(&alloc::format!("{prefix}w{l}")) else { break };
        biases.push(take(&alloc::format!("{prefix}b{l}"))?);
        weights.push(w);
    }
    Mlp::from_layers(weights, biases, normalize_output)
}

/// Cosine similarity of each proxy row with its real counterpart.
pub fn fidelity_cosines(proxies: &Mat, reals: &Mat) -> Result<Vec<f64>> {
    if proxies.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    if proxies.shape() != reals.shape() {
        return Err(Error::ShapeMismatch { op: "proxy_fidelity", expected: proxies.shape(), found: reals.shape() });
    }
    proxies.iter_rows().zip(reals.iter_rows()).map(|(p, r)| cosine_sim(p, r)).collect()
}

/// Empirical CDF of proxy-to-real cosine: one `(value, fraction ≤ value)`
/// point per distinct value, ascending.
pub fn proxy_fidelity_cdf(proxies: &Mat, reals: &Mat) -> Result<Vec<(f64, f64)>> {
    let mut sims = fidelity_cosines(proxies, reals)?;
    sims.sort_by(f64::total_cmp);
    let n = sims.len() as f64;
    let mut points: Vec<(f64, f64)> = Vec::new();
    for (i, &s) in sims.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match points.last_mut() {
            Some(last) if last.0 == s => last.1 = frac,
            _ => points.push((s, frac)),
        }
    }
    Ok(points)
}

/// Middle value of a sample (mean of the two middle values for even sizes).
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Ok(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// `true` when every row is unit length within the embedding tolerance.
pub fn rows_are_unit(m: &Mat) -> bool {
    m.iter_rows().all(|r| libm::fabs(crate::diffmath::norm(r) - 1.0) <= UNIT_TOL)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::{dot, norm};
    use crate::rng;
    use proptest::prelude::*;

    fn cfg(epochs: usize) -> RegressorFitConfig {
        RegressorFitConfig { epochs, batch_size: 32, lr: 1e-2, weight_decay: 0.0, hidden: alloc::vec![32], seed: 3 }
    }

    fn mse(a: &Mat, b: &Mat) -> f64 {
        a.zip_map(b, |x, y| (x - y) * (x - y)).sum() / a.rows() as f64
    }

    #[test]
    fn linear_regressor_recovers_identity() {
        let mut r = rng::seeded(10);
        let c = rng::unit_rows(&mut r, 400, 16);
        let (p, loss) = fit_regressor(&c, &c, RegressorArch::Linear, &cfg(150)).unwrap();
        assert!(loss < 1e-3, "{loss}");
        let hold = rng::unit_rows(&mut r, 100, 16);
        let out = p.predict_batch(&hold).unwrap();
        assert!(mse(&out, &hold) <= 1e-3);
    }

    #[test]
    fn constant_target_is_learned() {
        let mut r = rng::seeded(11);
        let c = rng::unit_rows(&mut r, 200, 8);
        let v = rng::unit_rows(&mut r, 1, 8);
        let targets = Mat::from_rows(&alloc::vec![v.row(0); 200]);
        let (p, _) = fit_regressor(&c, &targets, RegressorArch::Mlp, &cfg(60)).unwrap();
        for q in rng::unit_rows(&mut r, 10, 8).iter_rows() {
            assert!(dot(p.predict(q).unwrap().values(), v.row(0)) > 0.99);
        }
    }

    #[test]
    fn mlp_beats_noise_on_a_rotation() {
        let mut r = rng::seeded(12);
        let d = 8;
        // orthogonal matrix from Gram–Schmidt of a Gaussian matrix
        let mut q = rng::gaussian_mat(&mut r, d, d, 1.0);
        for i in 0..d {
            for j in 0..i {
                let k = dot(q.row(i), q.row(j));
                let prev = q.row(j).to_vec();
                q.row_mut(i).iter_mut().zip(&prev).for_each(|(a, b)| *a -= k * b);
            }
            let n = norm(q.row(i));
            q.row_mut(i).iter_mut().for_each(|a| *a /= n);
        }
        let c = rng::unit_rows(&mut r, 500, d);
        let x = c.matmul(&q);
        let (mlp, _) = fit_regressor(&c, &x, RegressorArch::Mlp, &cfg(100)).unwrap();
        let noise = fit_noise(d, 1e-3, 0);
        let hold = rng::unit_rows(&mut r, 100, d);
        let real = hold.matmul(&q);
        let e_mlp = mse(&mlp.predict_batch(&hold).unwrap(), &real);
        let e_noise = mse(&noise.predict_batch(&hold).unwrap(), &real);
        assert!(e_mlp < e_noise, "{e_mlp} vs {e_noise}");
    }

    #[test]
    fn noise_proxy_stays_close_to_its_anchor() {
        let mut r = rng::seeded(13);
        let p = fit_noise(16, 1e-3, 99);
        let c = rng::unit_rows(&mut r, 200, 16);
        let out = p.predict_batch(&c).unwrap();
        assert!(rows_are_unit(&out));
        for (a, b) in out.iter_rows().zip(c.iter_rows()) {
            assert!(dot(a, b) >= 0.99);
        }
    }

    #[test]
    fn tensors_round_trip_every_kind() {
        let mut r = rng::seeded(14);
        let c = rng::unit_rows(&mut r, 32, 4);
        let x = rng::unit_rows(&mut r, 32, 4);
        let (lin, _) = fit_regressor(&c, &x, RegressorArch::Linear, &cfg(1)).unwrap();
        let (mlp, _) = fit_regressor(&c, &x, RegressorArch::Mlp, &cfg(1)).unwrap();
        let dcfg = DiffusionFitConfig {
            epochs: 1,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 0.0,
            hidden: alloc::vec![8],
            seed: 0,
        };
        let sched = DiffusionSchedule::linear(10, 0.999, 0.01, 0.05, 1.0).unwrap();
        let (dm, _) = diffusion_fit(&c, &x, sched, Parameterization::X0, &dcfg).unwrap();
        let preds = [
            lin,
            mlp,
            fit_noise(4, 1e-3, 1),
            ProxyPredictor::Memory(MemoryBank::new(c.clone(), x.clone(), 0.07).unwrap()),
            ProxyPredictor::Diffusion(dm),
        ];
        for p in preds {
            let back = ProxyPredictor::from_tensors(p.kind(), p.tensors()).unwrap();
            assert_eq!(back, p);
            assert_eq!(back.checksum(), p.checksum());
            assert_eq!(back.predict_batch(&c).unwrap(), p.predict_batch(&c).unwrap());
        }
    }

    #[test]
    fn cdf_examples() {
        let mut r = rng::seeded(15);
        let a = rng::unit_rows(&mut r, 5, 4);
        assert_eq!(proxy_fidelity_cdf(&a, &a).unwrap().len(), 1);
        assert!((proxy_fidelity_cdf(&a, &a).unwrap()[0].0 - 1.0).abs() < 1e-12);
        let p = Mat::from_rows(&[[1.0, 0.0], [1.0, 0.0]]);
        let q = Mat::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(proxy_fidelity_cdf(&p, &q).unwrap(), alloc::vec![(0.0, 0.5), (1.0, 1.0)]);
        let orth = proxy_fidelity_cdf(&Mat::from_rows(&[[0.0, 1.0]]), &Mat::from_rows(&[[1.0, 0.0]])).unwrap();
        assert_eq!(orth, alloc::vec![(0.0, 1.0)]);
        assert!(matches!(proxy_fidelity_cdf(&Mat::zeros(0, 2), &Mat::zeros(0, 2)), Err(Error::EmptyInput)));
    }

    proptest! {
        #[test]
        fn cdf_matches_a_counting_oracle(seed in 0u64..500, n in 1usize..30) {
            let mut r = rng::seeded(seed);
            let p = rng::unit_rows(&mut r, n, 3);
            let q = rng::unit_rows(&mut r, n, 3);
            let sims = fidelity_cosines(&p, &q).unwrap();
            let cdf = proxy_fidelity_cdf(&p, &q).unwrap();
            prop_assert!(cdf.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1));
            prop_assert_eq!(cdf.last().unwrap().1, 1.0);
            for (v, frac) in cdf {
                let count = sims.iter().filter(|&&s| s <= v).count();
                prop_assert!((frac - count as f64 / n as f64).abs() < 1e-12);
            }
        }
    }
}
