use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{normalize_rows, Mat, Tape, EPS_NORM};
use crate::error::{Error, Result};
use crate::rng::{self, SeededRng};
use crate::train::{minibatches, AdamWConfig, Mlp, OptimizerState};

/// Number of time features fed to the denoiser.
pub const TIME_FEATURES: usize = 10;

/// What the denoiser predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// The clean embedding `x₀`; each step is a plain regression onto `x^a`.
    #[default]
    X0,
    /// The injected noise `ε`.
    Epsilon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    /// Cumulative signal fractions `ᾱ_t`, strictly decreasing.
    pub alpha_bar: Vec<f64>,
    pub cfg_dropout: f64,
    pub guidance_scale: f64,
}

impl DiffusionSchedule {
    /// `ᾱ` interpolated linearly from `start` to `end`.
    pub fn linear(num_steps: usize, start: f64, end: f64, cfg_dropout: f64, guidance_scale: f64) -> Result<Self> {
        if num_steps < 2 || !((0.99..1.0).contains(&start) && end > 0.0 && end < start) {
            return Err(Error::InvalidConfig(alloc::format!(
                "diffusion schedule needs >= 2 steps and 0.99 <= start < 1, 0 < end < start (got {num_steps}, {start}, {end})"
            )));
        }
        if !(0.0..1.0).contains(&cfg_dropout) || !(guidance_scale >= 0.0) {
            return Err(Error::InvalidConfig("cfg_dropout must lie in [0, 1) and guidance_scale be >= 0".into()));
        }
        let last = (num_steps - 1) as f64;
        let alpha_bar = (0..num_steps).map(|t| start + (end - start) * t as f64 / last).collect();
        Ok(DiffusionSchedule { alpha_bar, cfg_dropout, guidance_scale })
    }

    pub fn num_steps(&self) -> usize {
        self.alpha_bar.len()
    }

    /// `[√ᾱ, √(1−ᾱ), sin(2^k π s), cos(2^k π s)]` for `k = 0..4`, `s = t/(T−1)`.
    pub fn time_features(&self, t: usize) -> [f64; TIME_FEATURES] {
        let a = self.alpha_bar[t];
        let s = t as f64 / (self.num_steps() - 1) as f64;
        let mut f = [0.0; TIME_FEATURES];
        f[0] = libm::sqrt(a);
        f[1] = libm::sqrt(1.0 - a);
        for k in 0..4 {
            let w = core::f64::consts::PI * (1u32 << k) as f64 * s;
            f[2 + 2 * k] = libm::sin(w);
            f[3 + 2 * k] = libm::cos(w);
        }
        f
    }
}

/// Reverse iteration of the deterministic (η = 0) sampler from `init`.
///
/// `predict_x0(x_t, t)` returns the clean-embedding estimate for every row.
/// The last step returns that estimate directly.
pub fn ddim_sample(
    schedule: &DiffusionSchedule,
    init: Mat,
    mut predict_x0: impl FnMut(&Mat, usize) -> Result<Mat>,
) -> Result<Mat> {
    let mut x = init;
    for t in (0..schedule.num_steps()).rev() {
        let x0 = predict_x0(&x, t)?;
        if t == 0 {
            x = x0;
            break;
        }
        let (a, a_prev) = (schedule.alpha_bar[t], schedule.alpha_bar[t - 1]);
        let (sa, sn) = (libm::sqrt(a), libm::sqrt(1.0 - a));
        let (sp, snp) = (libm::sqrt(a_prev), libm::sqrt(1.0 - a_prev));
        x = x.zip_map(&x0, |xt, x0| {
            let eps = (xt - sa * x0) / sn;
            sp * x0 + snp * eps
        });
    }
    if !x.is_finite() {
        return Err(Error::NonFiniteLoss { step: 0, value: f64::NAN });
    }
    normalize_rows(&mut x, EPS_NORM)?;
    Ok(x)
}

/// Conditional denoiser over embeddings with a learned null condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionModel {
    pub schedule: DiffusionSchedule,
    pub parameterization: Parameterization,
    /// Input `[x_t, condition, time features]`, output `d`.
    pub denoiser: Mlp,
    /// `1 × d` learned token standing in for a dropped condition.
    pub null_token: Mat,
    /// `1 × d` starting state shared by every sample.
    pub init_state: Mat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionFitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionFitStats {
    /// Mean loss over the final epoch.
    pub final_loss: f64,
    pub condition_draws: usize,
    pub conditions_dropped: usize,
}

impl DiffusionModel {
    pub fn embed_dim(&self) -> usize {
        self.null_token.cols()
    }

    fn inputs(&self, x_t: &Mat, cond: &Mat, t: usize) -> Mat {
        let tf = self.schedule.time_features(t);
        let d = x_t.cols();
        let mut m = Mat::zeros(x_t.rows(), 2 * d + TIME_FEATURES);
        for i in 0..x_t.rows() {
            let row = m.row_mut(i);
            row[..d].copy_from_slice(x_t.row(i));
            row[d..2 * d].copy_from_slice(cond.row(i));
            row[2 * d..].copy_from_slice(&tf);
        }
        m
    }

    fn x0_estimate(&self, x_t: &Mat, cond: &Mat, t: usize) -> Result<Mat> {
        let out = self.denoiser.forward(&self.inputs(x_t, cond, t))?;
        Ok(match self.parameterization {
            Parameterization::X0 => out,
            Parameterization::Epsilon => {
                let a = self.schedule.alpha_bar[t];
                let (sa, sn) = (libm::sqrt(a), libm::sqrt(1.0 - a));
                x_t.zip_map(&out, |x, e| (x - sn * e) / sa)
            }
        })
    }

    /// Deterministic guided samples, one per condition row.
    pub fn sample(&self, conditions: &Mat, guidance_scale: f64) -> Result<Mat> {
        let n = conditions.rows();
        let d = self.embed_dim();
        if conditions.cols() != d {
            return Err(Error::ShapeMismatch { op: "diffusion_sample", expected: (n, d), found: conditions.shape() });
        }
        let init = Mat::from_rows(&alloc::vec![self.init_state.row(0); n]);
        let null = Mat::from_rows(&alloc::vec![self.null_token.row(0); n]);
        let w = guidance_scale;
        ddim_sample(&self.schedule, init, |x, t| {
            let cond = self.x0_estimate(x, conditions, t)?;
            if w == 0.0 {
                return Ok(cond);
            }
            let uncond = self.x0_estimate(x, &null, t)?;
            Ok(cond.zip_map(&uncond, |c, u| (1.0 + w) * c - w * u))
        })
    }
}

/// Trains the denoiser on `(c_i, x_i)` pairs: draw `t` uniformly, noise `x_i`
/// to `x_t`, replace the condition by the null token with probability
/// `cfg_dropout`, and regress onto `x_i` (or `ε`).
pub fn diffusion_fit(
    conditions: &Mat,
    targets: &Mat,
    schedule: DiffusionSchedule,
    parameterization: Parameterization,
    cfg: &DiffusionFitConfig,
) -> Result<(DiffusionModel, DiffusionFitStats)> {
    super::check_pairs(conditions, targets)?;
    let d = targets.cols();
    let mut r: SeededRng = rng::seeded(cfg.seed);
    let mut widths = alloc::vec![2 * d + TIME_FEATURES];
    widths.extend_from_slice(&cfg.hidden);
    widths.push(d);
    let mut model = DiffusionModel {
        denoiser: Mlp::new(&widths, false, &mut r),
        null_token: rng::gaussian_mat(&mut r, 1, d, 0.1),
        init_state: rng::gaussian_mat(&mut r, 1, d, 1.0),
        schedule,
        parameterization,
    };
    let n = conditions.rows();
    let batches_per_epoch = minibatches(&mut r, n, cfg.batch_size).len();
    let total = cfg.epochs * batches_per_epoch;
    let mut opt = {
        let mut params = model.denoiser.params();
        params.push(&model.null_token);
        OptimizerState::new(AdamWConfig::new(cfg.lr, cfg.weight_decay, total), &params)
    };
    let mut stats = DiffusionFitStats { final_loss: f64::NAN, condition_draws: 0, conditions_dropped: 0 };
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let batches = minibatches(&mut r, n, cfg.batch_size);
        for rows in &batches {
            let x0 = targets.select_rows(rows);
            let c = conditions.select_rows(rows);
            let b = rows.len();
            let mut x_t = Mat::zeros(b, d);
            let mut eps = Mat::zeros(b, d);
            let mut tf = Mat::zeros(b, TIME_FEATURES);
            let mut dropped = Vec::with_capacity(b);
            for i in 0..b {
                let t = r.random_range(0..model.schedule.num_steps());
                let a = model.schedule.alpha_bar[t];
                for j in 0..d {
                    let e = rng::gaussian(&mut r);
                    eps.row_mut(i)[j] = e;
                    x_t.row_mut(i)[j] = libm::sqrt(a) * x0.row(i)[j] + libm::sqrt(1.0 - a) * e;
                }
                tf.row_mut(i).copy_from_slice(&model.schedule.time_features(t));
                dropped.push(r.random::<f64>() < model.schedule.cfg_dropout);
            }
            stats.condition_draws += b;
            stats.conditions_dropped += dropped.iter().filter(|x| **x).count();

            let mut tape = Tape::new();
            let xv = tape.constant(x_t);
            let cv = tape.constant(c);
            let null = tape.param(model.null_token.clone());
            let cond = tape.replace_rows(cv, null, dropped)?;
            let tv = tape.constant(tf);
            let input = tape.concat_cols(&[xv, cond, tv])?;
            let out = model.denoiser.forward_on(&mut tape, input, true)?;
            let target = match parameterization {
                Parameterization::X0 => x0,
                Parameterization::Epsilon => eps,
            };
            let loss = tape.mse(out.output, target)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { step, value });
            }
            epoch_loss += value * b as f64;
            let grads = tape.backward(loss)?;
            let mut g: Vec<Mat> = out.params.iter().map(|&v| grads.get(v).cloned().expect("param reached")).collect();
            g.push(grads.get_or_zeros(null, (1, d)));
            let mut params = model.denoiser.params_mut();
            params.push(&mut model.null_token);
            opt.step(&mut params, &g)?;
            step += 1;
        }
        stats.final_loss = epoch_loss / n as f64;
    }
    Ok((model, stats))
}
