use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::theorem::{verify_theorem1, LambdaChoice, TheoremBatch, TheoremReport, TheoremSettings};
use crate::diffmath::EPS_PROJ;
use crate::error::{Error, Result};
use crate::losses::ProxyAlignMode;
use crate::rng::{self, derive_seed};
use crate::synth::{Split, SyntheticWorld};
use crate::train::pipeline::{run_stage3, PipelineSettings, Prepared};
use crate::train::StageOutput;

/// Monitoring period used when the configuration leaves it off; the monitor
/// only reads the encoder, so it never changes a trajectory.
const ABLATION_MONITOR_EVERY: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub emergent_r1: f64,
    pub anchor_r1: f64,
    pub emergent_top1: f64,
}

/// Stage 3 once per `λ` from the same stages 1–2 and seed. Rows are sorted by
/// `λ` and come with the stage-3 run that produced them.
pub fn lambda_sweep(
    world: &SyntheticWorld,
    settings: &PipelineSettings,
    prepared: &Prepared,
    lambdas: &[f64],
) -> Result<Vec<(SweepRow, StageOutput)>> {
    if lambdas.is_empty() {
        return Err(Error::InvalidConfig("lambda sweep needs at least one value".into()));
    }
    if let Some(bad) = lambdas.iter().find(|l| !(**l >= 0.0)) {
        return Err(Error::InvalidConfig(alloc::format!("lambda values must be >= 0, got {bad}")));
    }
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
        .into_iter()
        .map(|lambda| {
            let (out, m) = run_stage3(world, settings, prepared, lambda, settings.stage3.mode)?;
            let row =
                SweepRow { lambda, emergent_r1: m.emergent_r1, anchor_r1: m.anchor_r1, emergent_top1: m.emergent_top1 };
            Ok((row, out))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: ProxyAlignMode,
    pub lambda: f64,
    pub seed: u64,
    pub world_hash: alloc::string::String,
    pub emergent_r1: f64,
    pub anchor_r1: f64,
    pub emergent_top1: f64,
    pub anchor_top1: f64,
    /// Mean `|c̄ᵀ ∂L^proxy/∂x|` over monitored steps.
    pub mean_proxy_grad_alignment: f64,
}

/// Stage 3 with the projected regularizer and with plain proxy InfoNCE, same
/// `λ = 1`, seed and world.
pub fn osr_vs_direct_ablation(
    world: &SyntheticWorld,
    settings: &PipelineSettings,
    prepared: &Prepared,
) -> Result<[(AblationRow, StageOutput); 2]> {
    let mut s = settings.clone();
    if s.stage3.monitor_every == 0 {
        s.stage3.monitor_every = ABLATION_MONITOR_EVERY;
    }
    let row = |mode| -> Result<(AblationRow, StageOutput)> {
        let (out, m) = run_stage3(world, &s, prepared, 1.0, mode)?;
        let row = AblationRow {
            mode,
            lambda: 1.0,
            seed: s.seed,
            world_hash: world.fingerprint_hex(),
            emergent_r1: m.emergent_r1,
            anchor_r1: m.anchor_r1,
            emergent_top1: m.emergent_top1,
            anchor_top1: m.anchor_top1,
            mean_proxy_grad_alignment: out.mean_proxy_grad_alignment().unwrap_or(0.0),
        };
        Ok((row, out))
    };
    Ok([row(ProxyAlignMode::Osr)?, row(ProxyAlignMode::Direct)?])
}

/// Where the first-order check looks: encoder states after each listed number
/// of stage-3 epochs (0 is the initial encoder), each paired with several
/// random training batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SnapshotPlan {
    pub epochs: Vec<usize>,
    pub batches_per_state: usize,
    pub batch_size: usize,
    pub tolerance: f64,
    pub fd_coords: usize,
    pub seed: u64,
}

impl Default for SnapshotPlan {
    fn default() -> Self {
        SnapshotPlan {
            epochs: alloc::vec![0, 1, 3, 10, 40],
            batches_per_state: 20,
            batch_size: 16,
            tolerance: 1e-8,
            fd_coords: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotTheoremReport {
    pub snapshots: usize,
    pub applicable: usize,
    pub violations: usize,
    pub worst_inner_product: f64,
    pub worst_relative: f64,
    pub fd_max_rel_error: f64,
    /// One report per snapshot, in plan order.
    pub reports: Vec<TheoremReport>,
}

/// Checks `(a + λo)ᵀa ≥ −tolerance` with `λ` at each sample's own bound on
/// every snapshot of the plan. Stage 3 runs with the configured `λ` and mode;
/// the check itself always uses the projected regularizer.
pub fn theorem_on_snapshots(
    world: &SyntheticWorld,
    settings: &PipelineSettings,
    prepared: &Prepared,
    plan: &SnapshotPlan,
) -> Result<SnapshotTheoremReport> {
    if plan.epochs.is_empty() || plan.batches_per_state == 0 || plan.batch_size == 0 {
        return Err(Error::InvalidConfig("snapshot plan needs epochs, batches and a batch size".into()));
    }
    let split = world.split(Split::TrainCB);
    let obs = split.obs_b.as_ref().ok_or(Error::EmptyInput)?;
    if plan.batch_size > split.len() {
        return Err(Error::InvalidConfig(alloc::format!(
            "snapshot batch_size {} exceeds the {} training rows",
            plan.batch_size,
            split.len()
        )));
    }
    let ts = TheoremSettings {
        tau: settings.stage3.tau,
        eps: EPS_PROJ,
        mode: ProxyAlignMode::Osr,
        tolerance: plan.tolerance,
        fd_coords: plan.fd_coords,
        fd_seed: derive_seed(plan.seed, 1),
    };
    let mut r = rng::seeded(derive_seed(plan.seed, 2));
    let mut reports = Vec::new();
    for &epochs in &plan.epochs {
        let encoder = if epochs == 0 {
            prepared.e_b.clone()
        } else {
            let mut s = settings.clone();
            s.stage3.epochs = epochs;
            run_stage3(world, &s, prepared, s.stage3.lambda, s.stage3.mode)?.0.encoder
        };
        for _ in 0..plan.batches_per_state {
            let mut rows = rng::permutation(&mut r, split.len());
            rows.truncate(plan.batch_size);
            let batch = TheoremBatch {
                obs: obs.select_rows(&rows),
                anchors: split.anchors.select_rows(&rows),
                proxies: prepared.train_proxies.select_rows(&rows),
            };
            reports.push(verify_theorem1(&encoder, &batch, &[LambdaChoice::AtBound], &ts)?);
        }
    }
    Ok(SnapshotTheoremReport {
        snapshots: reports.len(),
        applicable: reports.iter().map(|r| r.applicable).sum(),
        violations: reports.iter().map(|r| r.violations).sum(),
        worst_inner_product: reports.iter().map(|r| r.worst_inner_product).fold(f64::INFINITY, f64::min),
        worst_relative: reports.iter().map(|r| r.worst_relative).fold(f64::INFINITY, f64::min),
        fd_max_rel_error: reports.iter().map(|r| r.fd_max_rel_error).fold(0.0, f64::max),
        reports,
    })
}
