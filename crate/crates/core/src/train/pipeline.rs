//! The three stages wired together under one seed.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{
    encoder_forward, stage1_anchor_align, stage2_proxy_fit, stage3_with_proxies, Encoder, StageConfig, StageOutput,
};
use crate::diffmath::Mat;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalMetrics};
use crate::losses::ProxyAlignMode;
use crate::proxy::{fidelity_cosines, median, FittedProxy, ProxyConfig, ProxyKind};
use crate::rng::{self, derive_seed};
use crate::synth::{Modality, Split, SyntheticWorld};

const STREAM_ENCODER_A: u64 = 1;
const STREAM_ENCODER_B: u64 = 2;
const STREAM_STAGE1: u64 = 11;
const STREAM_PROXY: u64 = 12;
const STREAM_STAGE3: u64 = 13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub hidden: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { hidden: alloc::vec![64, 64] }
    }
}

/// Everything needed to train and evaluate one bridge on a given world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSettings {
    /// Drives encoder initialization and every stage's batch order.
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub stage1: StageConfig,
    pub proxy: ProxyConfig,
    pub stage3: StageConfig,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        PipelineSettings {
            seed: 0,
            encoder: EncoderConfig::default(),
            stage1: StageConfig { lambda: 0.0, ..StageConfig::default() },
            proxy: ProxyConfig::default(),
            stage3: StageConfig { epochs: 40, lr: 5e-3, ..StageConfig::default() },
        }
    }
}

impl PipelineSettings {
    pub fn validate(&self) -> Result<()> {
        self.stage1.validate()?;
        self.stage3.validate()?;
        if self.encoder.hidden.contains(&0) {
            return Err(Error::InvalidConfig("encoder.hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn stage1_config(&self) -> StageConfig {
        StageConfig { seed: derive_seed(self.seed, STREAM_STAGE1), ..self.stage1.clone() }
    }

    pub fn stage3_config(&self) -> StageConfig {
        StageConfig { seed: derive_seed(self.seed, STREAM_STAGE3), ..self.stage3.clone() }
    }

    pub fn proxy_seed(&self) -> u64 {
        derive_seed(self.seed, STREAM_PROXY)
    }

    /// Freshly initialized `(E_a, E_b)`.
    pub fn initial_encoders(&self, world: &SyntheticWorld) -> (Encoder, Encoder) {
        let d = world.spec.embed_dim;
        let mut ra = rng::seeded(derive_seed(self.seed, STREAM_ENCODER_A));
        let mut rb = rng::seeded(derive_seed(self.seed, STREAM_ENCODER_B));
        (
            Encoder::new(Modality::A, world.spec.modality_a.obs_dim, &self.encoder.hidden, d, &mut ra),
            Encoder::new(Modality::B, world.spec.modality_b.obs_dim, &self.encoder.hidden, d, &mut rb),
        )
    }
}

/// Stages 1 and 2 for one predictor kind: the shared starting point of every
/// stage-3 variant.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub stage1: StageOutput,
    pub proxy: FittedProxy,
    /// Proxies for every row of the `(C, M_b)` training split.
    pub train_proxies: Mat,
    /// Initial `E_b`.
    pub e_b: Encoder,
}

impl Prepared {
    pub fn e_a(&self) -> &Encoder {
        &self.stage1.encoder
    }
}

pub fn run_stage1(world: &SyntheticWorld, settings: &PipelineSettings) -> Result<StageOutput> {
    settings.validate()?;
    let (e_a, _) = settings.initial_encoders(world);
    stage1_anchor_align(world, e_a, &settings.stage1_config())
}

/// Stage 2 plus proxy precomputation, starting from a finished stage 1.
pub fn prepare_with(
    world: &SyntheticWorld,
    settings: &PipelineSettings,
    stage1: StageOutput,
    kind: ProxyKind,
) -> Result<Prepared> {
    let cfg = ProxyConfig { kind, ..settings.proxy.clone() };
    let proxy = stage2_proxy_fit(world, &stage1.encoder, &cfg, settings.proxy_seed())?;
    let train_proxies = proxy.predictor.predict_batch(&world.split(Split::TrainCB).anchors)?;
    let (_, e_b) = settings.initial_encoders(world);
    Ok(Prepared { stage1, proxy, train_proxies, e_b })
}

pub fn prepare(world: &SyntheticWorld, settings: &PipelineSettings) -> Result<Prepared> {
    let stage1 = run_stage1(world, settings)?;
    prepare_with(world, settings, stage1, settings.proxy.kind)
}

/// Stage 3 with an overridden `λ` and alignment mode, then evaluation.
pub fn run_stage3(
    world: &SyntheticWorld,
    settings: &PipelineSettings,
    prepared: &Prepared,
    lambda: f64,
    mode: ProxyAlignMode,
) -> Result<(StageOutput, EvalMetrics)> {
    let cfg = StageConfig { lambda, mode, ..settings.stage3_config() };
    let out = stage3_with_proxies(world, prepared.e_b.clone(), &prepared.train_proxies, &cfg)?;
    let metrics = evaluate(world, prepared.e_a(), &out.encoder)?;
    Ok((out, metrics))
}

/// Held-out proxy quality: cosine of `predict(c_i)` with `E_a(o_i^a)` on the
/// emergent evaluation split.
pub fn holdout_fidelity(world: &SyntheticWorld, e_a: &Encoder, proxy: &FittedProxy) -> Result<(Mat, Mat)> {
    let split = world.split(Split::EvalAB);
    let obs = split.obs_a.as_ref().ok_or(Error::EmptyInput)?;
    let reals = encoder_forward(e_a, obs)?;
    let proxies = proxy.predictor.predict_batch(&split.anchors)?;
    Ok((proxies, reals))
}

pub fn holdout_fidelity_median(world: &SyntheticWorld, e_a: &Encoder, proxy: &FittedProxy) -> Result<f64> {
    let (p, r) = holdout_fidelity(world, e_a, proxy)?;
    median(&fidelity_cosines(&p, &r)?)
}

/// Result of a complete three-stage run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub prepared: Prepared,
    pub stage3: StageOutput,
    pub metrics: EvalMetrics,
    pub fidelity_median: f64,
}

pub fn run_pipeline(world: &SyntheticWorld, settings: &PipelineSettings) -> Result<RunResult> {
    let prepared = prepare(world, settings)?;
    let (stage3, metrics) = run_stage3(world, settings, &prepared, settings.stage3.lambda, settings.stage3.mode)?;
    let fidelity_median = holdout_fidelity_median(world, prepared.e_a(), &prepared.proxy)?;
    Ok(RunResult { prepared, stage3, metrics, fidelity_median })
}
