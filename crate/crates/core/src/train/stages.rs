use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{encoder_forward, AdamWConfig, Encoder, OptimizerState};
use crate::diffmath::{Mat, Tape, EPS_PROJ};
use crate::error::{Error, Result};
use crate::eval::theorem_samples;
use crate::losses::{combined_loss, symmetric_info_nce_on, ProxyAlignMode};
use crate::proxy::{fit_proxy, FittedProxy, ProxyConfig};
use crate::synth::{sample_pairs, EpochCursor, PairId, Split, SyntheticWorld};

/// Numerical zero for the monitored inner product.
const MONITOR_TOL: f64 = 1e-8;

/// Settings for a contrastive stage (1 or 3).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub tau: f64,
    /// Weight of the proxy-alignment term (stage 3 only).
    pub lambda: f64,
    pub lr: f64,
    pub weight_decay: f64,
    /// Return the input encoder untouched.
    pub skip: bool,
    pub mode: ProxyAlignMode,
    /// Run the first-order monitor every this many steps; 0 disables it.
    pub monitor_every: usize,
    /// Batch-order seed. Filled in by the pipeline, never read from config.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            epochs: 20,
            batch_size: 64,
            tau: 0.07,
            lambda: 1.0,
            lr: 2e-3,
            weight_decay: 0.01,
            skip: false,
            mode: ProxyAlignMode::Osr,
            monitor_every: 0,
            seed: 0,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(alloc::format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be at least 2 for contrastive stages".into()));
        }
        if !(self.tau > 0.0) || !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("tau must be positive; lr and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

/// First-order diagnostics on one stage-3 batch, before the update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorRecord {
    /// Smallest per-sample bound on `λ`; `None` when every bound is infinite.
    pub lambda_bound: Option<f64>,
    /// Smallest per-sample inner product at the configured `λ`.
    pub min_inner_product: f64,
    /// No sample with `λ ≤ bound` had a negative inner product.
    pub satisfied: bool,
    /// Mean `|c̄_iᵀ ∂L^proxy/∂x_i|` over active samples.
    pub proxy_grad_alignment: f64,
}

/// One line of a training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: u8,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub infonce: f64,
    pub osr: Option<f64>,
    pub skipped: usize,
    pub monitor: Option<MonitorRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub encoder: Encoder,
    pub log: Vec<LogRecord>,
    /// Batches on which every sample's regularizer term was degenerate.
    pub degenerate_batches: usize,
}

impl StageOutput {
    /// Mean of the monitored proxy-gradient alignment, if any step was monitored.
    pub fn mean_proxy_grad_alignment(&self) -> Option<f64> {
        let v: Vec<f64> = self.log.iter().filter_map(|r| r.monitor.as_ref().map(|m| m.proxy_grad_alignment)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn monitor_violations(&self) -> usize {
        self.log.iter().filter(|r| r.monitor.as_ref().is_some_and(|m| !m.satisfied)).count()
    }
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    let full = n.div_ceil(batch);
    if n > 1 && n % batch == 1 {
        full - 1
    } else {
        full
    }
}

/// Gradient step on `e`'s parameters; frozen encoders are left untouched.
fn apply(e: &mut Encoder, opt: &mut OptimizerState, grads: Vec<Mat>) -> Result<()> {
    if e.frozen {
        return Ok(());
    }
    opt.step(&mut e.mlp.params_mut(), &grads)
}

/// Trains `e_a` with symmetric InfoNCE against the anchor embeddings of the
/// `(C, M_a)` training split.
pub fn stage1_anchor_align(world: &SyntheticWorld, e_a: Encoder, cfg: &StageConfig) -> Result<StageOutput> {
    cfg.validate()?;
    let mut e = e_a;
    let mut log = Vec::new();
    if cfg.skip {
        return Ok(StageOutput { encoder: e, log, degenerate_batches: 0 });
    }
    let n = world.split(Split::TrainCA).len();
    let per_epoch = steps_per_epoch(n, cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let mut opt = OptimizerState::new(AdamWConfig::new(cfg.lr, cfg.weight_decay, total), &e.mlp.params());
    let mut cursor = EpochCursor::new(cfg.seed);
    for step in 0..total {
        let batch = sample_pairs(world, PairId::AnchorA, Split::TrainCA, cfg.batch_size, &mut cursor)?;
        let mut tape = Tape::new();
        let x = tape.constant(batch.right);
        let out = e.mlp.forward_on(&mut tape, x, !e.frozen)?;
        let c = tape.constant(batch.left);
        let loss = symmetric_info_nce_on(&mut tape, out.output, c, cfg.tau)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step, value });
        }
        let lr = opt.lr_at(step + 1);
        if !e.frozen {
            let grads = tape.backward(loss)?;
            let g = out.params.iter().map(|&v| grads.get_or_zeros(v, tape.value(v).shape())).collect();
            apply(&mut e, &mut opt, g)?;
        }
        log.push(LogRecord {
            stage: 1,
            epoch: step / per_epoch,
            step,
            lr,
            loss: value,
            infonce: value,
            osr: None,
            skipped: 0,
            monitor: None,
        });
    }
    Ok(StageOutput { encoder: e, log, degenerate_batches: 0 })
}

/// Fits a proxy predictor on `(c_i, E_a(o_i^a))` from the `(C, M_a)` training
/// split. `e_a` is only read.
pub fn stage2_proxy_fit(world: &SyntheticWorld, e_a: &Encoder, cfg: &ProxyConfig, seed: u64) -> Result<FittedProxy> {
    let split = world.split(Split::TrainCA);
    let obs = split.obs_a.as_ref().ok_or(Error::ForbiddenPair { pair: PairId::AnchorA, split: Split::TrainCA })?;
    let targets = encoder_forward(e_a, obs)?;
    fit_proxy(&split.anchors, &targets, cfg, seed)
}

/// Trains `e_b` on the `(C, M_b)` training split with the combined objective,
/// using the predictor's outputs as constant proxies.
pub fn stage3_bridge_align(
    world: &SyntheticWorld,
    e_b: Encoder,
    predictor: &crate::proxy::ProxyPredictor,
    cfg: &StageConfig,
) -> Result<StageOutput> {
    let proxies = predictor.predict_batch(&world.split(Split::TrainCB).anchors)?;
    stage3_with_proxies(world, e_b, &proxies, cfg)
}

/// [`stage3_bridge_align`] with proxies for every `(C, M_b)` training row
/// already computed (row `i` belongs to sample `i` of the split).
pub fn stage3_with_proxies(
    world: &SyntheticWorld,
    e_b: Encoder,
    proxies: &Mat,
    cfg: &StageConfig,
) -> Result<StageOutput> {
    cfg.validate()?;
    let mut e = e_b;
    let mut log = Vec::new();
    if cfg.skip {
        return Ok(StageOutput { encoder: e, log, degenerate_batches: 0 });
    }
    let n = world.split(Split::TrainCB).len();
    if proxies.rows() != n {
        return Err(Error::ShapeMismatch {
            op: "stage3 proxies",
            expected: (n, e.embed_dim()),
            found: proxies.shape(),
        });
    }
    let per_epoch = steps_per_epoch(n, cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let mut opt = OptimizerState::new(AdamWConfig::new(cfg.lr, cfg.weight_decay, total), &e.mlp.params());
    let mut cursor = EpochCursor::new(cfg.seed);
    let mut degenerate_batches = 0;
    let mut degenerate_in_epoch = 0;
    for step in 0..total {
        let batch = sample_pairs(world, PairId::AnchorB, Split::TrainCB, cfg.batch_size, &mut cursor)?;
        let xa_hat = proxies.select_rows(&batch.rows);
        let monitor = if cfg.monitor_every > 0 && step % cfg.monitor_every == 0 {
            Some(monitor(&e, &batch.right, &batch.left, &xa_hat, cfg)?)
        } else {
            None
        };

        let mut tape = Tape::new();
        let x = tape.constant(batch.right.clone());
        let out = e.mlp.forward_on(&mut tape, x, !e.frozen)?;
        let (combined, out) =
            match combined_loss(&mut tape, out.output, &batch.left, &xa_hat, cfg.lambda, cfg.tau, EPS_PROJ, cfg.mode) {
                Ok(c) => (c, out),
                Err(Error::AllSamplesDegenerate) => {
                    // every regularizer row is degenerate: take an anchor-only step
                    degenerate_batches += 1;
                    degenerate_in_epoch += 1;
                    tape = Tape::new();
                    let x = tape.constant(batch.right);
                    let out = e.mlp.forward_on(&mut tape, x, !e.frozen)?;
                    let c =
                        combined_loss(&mut tape, out.output, &batch.left, &xa_hat, 0.0, cfg.tau, EPS_PROJ, cfg.mode)?;
                    (c, out)
                }
                Err(err) => return Err(err),
            };
        let report = &combined.report;
        if !report.total.is_finite() {
            return Err(Error::NonFiniteLoss { step, value: report.total });
        }
        let lr = opt.lr_at(step + 1);
        if !e.frozen {
            let grads = tape.backward(combined.total)?;
            let g = out.params.iter().map(|&v| grads.get_or_zeros(v, tape.value(v).shape())).collect();
            apply(&mut e, &mut opt, g)?;
        }
        log.push(LogRecord {
            stage: 3,
            epoch: step / per_epoch,
            step,
            lr,
            loss: report.total,
            infonce: report.infonce_component,
            osr: combined.osr.as_ref().map(|_| report.osr_component),
            skipped: report.skipped_samples,
            monitor,
        });
        if (step + 1) % per_epoch == 0 {
            if degenerate_in_epoch == per_epoch && cfg.lambda > 0.0 {
                return Err(Error::AllSamplesDegenerate);
            }
            degenerate_in_epoch = 0;
        }
    }
    Ok(StageOutput { encoder: e, log, degenerate_batches })
}

fn monitor(e: &Encoder, obs: &Mat, anchors: &Mat, proxies: &Mat, cfg: &StageConfig) -> Result<MonitorRecord> {
    let samples = theorem_samples(e, obs, anchors, proxies, cfg.tau, EPS_PROJ, cfg.mode)?;
    let mut bound: Option<f64> = None;
    let mut min_ip = f64::INFINITY;
    let mut satisfied = true;
    let mut alignment = 0.0;
    for s in &samples {
        if let Some(b) = s.bound {
            bound = Some(bound.map_or(b, |m| m.min(b)));
        }
        let ip = s.inner_product(cfg.lambda);
        min_ip = min_ip.min(ip);
        if s.admits(cfg.lambda) && ip < -MONITOR_TOL {
            satisfied = false;
        }
        alignment += s.proxy_grad_alignment;
    }
    let count = samples.len().max(1) as f64;
    Ok(MonitorRecord {
        lambda_bound: bound,
        min_inner_product: min_ip,
        satisfied,
        proxy_grad_alignment: alignment / count,
    })
}
