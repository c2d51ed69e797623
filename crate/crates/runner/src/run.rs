//! One run of the experiment runner: every mode writes into `cfg.out`.

use std::io::Write;
use std::path::{Path, PathBuf};

use bridge_core::eval::{
    evaluate, lambda_sweep, osr_vs_direct_ablation, theorem_on_snapshots, verify_lemma1, EvalMetrics,
};
use bridge_core::losses::ProxyAlignMode;
use bridge_core::proxy::{fidelity_cosines, median, proxy_fidelity_cdf, ProxyKind};
use bridge_core::synth::{generate_world, SyntheticWorld};
use bridge_core::train::pipeline::{holdout_fidelity, prepare_with, run_stage1, run_stage3, Prepared};
use bridge_core::train::{Encoder, LogRecord};
use serde::Serialize;

use crate::config::{echo, ExperimentConfig, Mode};
use crate::error::{Result, RunError};
use crate::formats::{
    encoder_checkpoint, encoder_from_checkpoint, proxy_checkpoint, proxy_from_checkpoint, read_world, write_csv,
    write_file, write_json, write_jsonl, write_world, Checkpoint,
};

pub const WORLD_FILE: &str = "world.bin";
pub const CONFIG_ECHO: &str = "config.toml";
pub const WORLD_HASH: &str = "world_hash.txt";

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    stdout: &'a mut dyn Write,
}

impl Run<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.cfg.out.join(rel)
    }

    fn emit(&mut self, name: &str, value: f64) -> Result<()> {
        let rec = serde_json::json!({ "mode": self.cfg.mode.name(), "metric": name, "value": value });
        writeln!(self.stdout, "{rec}").map_err(|e| RunError::io("<stdout>", e))
    }

    fn emit_record<T: Serialize>(&mut self, table: &str, row: &T) -> Result<()> {
        let rec = serde_json::json!({ "mode": self.cfg.mode.name(), "table": table, "row": row });
        writeln!(self.stdout, "{rec}").map_err(|e| RunError::io("<stdout>", e))
    }

    fn emit_metrics(&mut self, m: &EvalMetrics) -> Result<()> {
        self.emit("emergent_r1", m.emergent_r1)?;
        self.emit("emergent_r5", m.emergent_r5)?;
        self.emit("anchor_r1", m.anchor_r1)?;
        self.emit("emergent_top1", m.emergent_top1)?;
        self.emit("anchor_top1", m.anchor_top1)
    }

    /// Loads `world.bin` from the output directory, or generates and writes it
    /// when absent. A stored world must match the configured spec.
    fn world(&mut self, regenerate: bool) -> Result<SyntheticWorld> {
        let path = self.path(WORLD_FILE);
        let world = if !regenerate && path.exists() {
            let w = read_world(&path)?;
            if w.spec != self.cfg.world {
                return Err(RunError::Config(format!(
                    "{} was generated from a different world spec; rerun gen-data or change `out`",
                    path.display()
                )));
            }
            w
        } else {
            let w = generate_world(&self.cfg.world)?;
            write_world(&path, &w)?;
            w
        };
        write_file(&self.path(WORLD_HASH), format!("{}\n", world.fingerprint_hex()).as_bytes())?;
        Ok(world)
    }

    fn prepare(&mut self, world: &SyntheticWorld, kind: ProxyKind) -> Result<Prepared> {
        let stage1 = run_stage1(world, &self.cfg.pipeline)?;
        write_jsonl(&self.path("logs/stage1.jsonl"), &stage1.log)?;
        Ok(prepare_with(world, &self.cfg.pipeline, stage1, kind)?)
    }

    fn stage3_log(&self, name: &str, log: &[LogRecord]) -> Result<()> {
        write_jsonl(&self.path(&format!("logs/{name}.jsonl")), log)
    }
}

#[derive(Serialize)]
struct TrainMetrics<'a> {
    world_hash: String,
    seed: u64,
    proxy_kind: &'a str,
    lambda: f64,
    align_mode: ProxyAlignMode,
    #[serde(flatten)]
    metrics: EvalMetrics,
    fidelity_median: f64,
    proxy_final_loss: Option<f64>,
    degenerate_batches: usize,
    encoder_a_sha256: String,
    encoder_b_sha256: String,
    proxy_sha256: String,
}

#[derive(Serialize)]
struct EvalReport {
    world_hash: String,
    #[serde(flatten)]
    metrics: EvalMetrics,
    fidelity_median: f64,
}

#[derive(Serialize)]
struct CdfRow<'a> {
    kind: &'a str,
    cosine: f64,
    cumulative: f64,
}

#[derive(Serialize)]
struct FidelityRow<'a> {
    kind: &'a str,
    median: f64,
}

#[derive(Serialize)]
struct VerifySummary {
    theorem_snapshots: usize,
    theorem_applicable: usize,
    theorem_violations: usize,
    theorem_worst_inner_product: f64,
    theorem_worst_relative: f64,
    theorem_fd_max_rel_error: f64,
    lemma_instances: usize,
    lemma_violations: usize,
    lemma_worst_margin: f64,
    lemma_projection_violations: usize,
    passed: bool,
}

fn fidelity_cdf_rows(
    kind: ProxyKind,
    proxies: &bridge_core::diffmath::Mat,
    reals: &bridge_core::diffmath::Mat,
) -> Result<Vec<CdfRow<'static>>> {
    Ok(proxy_fidelity_cdf(proxies, reals)?
        .into_iter()
        .map(|(cosine, cumulative)| CdfRow { kind: kind.name(), cosine, cumulative })
        .collect())
}

fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoints")
}

fn train(run: &mut Run) -> Result<()> {
    let world = run.world(false)?;
    let s = &run.cfg.pipeline;
    let prepared = run.prepare(&world, s.proxy.kind)?;
    let (stage3, metrics) = run_stage3(&world, s, &prepared, s.stage3.lambda, s.stage3.mode)?;
    run.stage3_log("stage3", &stage3.log)?;
    let (proxies, reals) = holdout_fidelity(&world, prepared.e_a(), &prepared.proxy)?;
    let fidelity_median = median(&fidelity_cosines(&proxies, &reals)?)?;

    let dir = checkpoint_dir(&run.cfg.out);
    encoder_checkpoint(prepared.e_a()).write(&dir.join("encoder_a.ckpt"))?;
    encoder_checkpoint(&stage3.encoder).write(&dir.join("encoder_b.ckpt"))?;
    proxy_checkpoint(&prepared.proxy.predictor).write(&dir.join("proxy.ckpt"))?;

    let report = TrainMetrics {
        world_hash: world.fingerprint_hex(),
        seed: s.seed,
        proxy_kind: s.proxy.kind.name(),
        lambda: s.stage3.lambda,
        align_mode: s.stage3.mode,
        metrics,
        fidelity_median,
        proxy_final_loss: prepared.proxy.final_loss,
        degenerate_batches: stage3.degenerate_batches,
        encoder_a_sha256: hex(&prepared.e_a().mlp.checksum()),
        encoder_b_sha256: hex(&stage3.encoder.mlp.checksum()),
        proxy_sha256: hex(&prepared.proxy.predictor.checksum()),
    };
    write_json(&run.path("metrics.json"), &report)?;
    run.emit_metrics(&metrics)?;
    run.emit("fidelity_median", fidelity_median)
}

fn load_encoder(path: &Path) -> Result<Encoder> {
    encoder_from_checkpoint(Checkpoint::read(path)?, path)
}

fn eval(run: &mut Run) -> Result<()> {
    let world = run.world(false)?;
    let dir = checkpoint_dir(&run.cfg.out);
    let e_a = load_encoder(&dir.join("encoder_a.ckpt"))?;
    let e_b = load_encoder(&dir.join("encoder_b.ckpt"))?;
    let proxy_path = dir.join("proxy.ckpt");
    let predictor = proxy_from_checkpoint(Checkpoint::read(&proxy_path)?, &proxy_path)?;
    let metrics = evaluate(&world, &e_a, &e_b)?;

    let split = world.split(bridge_core::synth::Split::EvalAB);
    let obs = split.obs_a.as_ref().ok_or(bridge_core::Error::EmptyInput)?;
    let reals = bridge_core::train::encoder_forward(&e_a, obs)?;
    let proxies = predictor.predict_batch(&split.anchors)?;
    let fidelity_median = median(&fidelity_cosines(&proxies, &reals)?)?;
    write_csv(&run.path("fidelity_cdf.csv"), &fidelity_cdf_rows(predictor.kind(), &proxies, &reals)?)?;

    let report = EvalReport { world_hash: world.fingerprint_hex(), metrics, fidelity_median };
    write_json(&run.path("eval.json"), &report)?;
    run.emit_metrics(&metrics)?;
    run.emit("fidelity_median", fidelity_median)
}

fn sweep(run: &mut Run) -> Result<()> {
    let world = run.world(false)?;
    let prepared = run.prepare(&world, run.cfg.pipeline.proxy.kind)?;
    let points = lambda_sweep(&world, &run.cfg.pipeline, &prepared, &run.cfg.sweep.lambdas)?;
    let mut rows = Vec::new();
    for (row, out) in points {
        run.stage3_log(&format!("stage3_lambda_{}", row.lambda), &out.log)?;
        run.emit_record("sweep", &row)?;
        rows.push(row);
    }
    write_csv(&run.path("sweep.csv"), &rows)
}

fn ablate(run: &mut Run) -> Result<()> {
    let world = run.world(false)?;
    let stage1 = run_stage1(&world, &run.cfg.pipeline)?;
    write_jsonl(&run.path("logs/stage1.jsonl"), &stage1.log)?;

    let mut fidelity = Vec::new();
    let mut cdf = Vec::new();
    let mut configured = None;
    for kind in ProxyKind::ALL {
        let prepared = prepare_with(&world, &run.cfg.pipeline, stage1.clone(), kind)?;
        let (proxies, reals) = holdout_fidelity(&world, prepared.e_a(), &prepared.proxy)?;
        let row = FidelityRow { kind: kind.name(), median: median(&fidelity_cosines(&proxies, &reals)?)? };
        run.emit_record("proxy_fidelity", &row)?;
        fidelity.push(row);
        cdf.extend(fidelity_cdf_rows(kind, &proxies, &reals)?);
        if kind == run.cfg.pipeline.proxy.kind {
            configured = Some(prepared);
        }
    }
    write_csv(&run.path("proxy_fidelity.csv"), &fidelity)?;
    write_csv(&run.path("proxy_cdf.csv"), &cdf)?;

    let prepared = configured.expect("the configured kind is one of ProxyKind::ALL");
    let rows = osr_vs_direct_ablation(&world, &run.cfg.pipeline, &prepared)?;
    let mut table = Vec::new();
    for (row, out) in rows {
        let name = match row.mode {
            ProxyAlignMode::Osr => "stage3_osr",
            ProxyAlignMode::Direct => "stage3_direct",
        };
        run.stage3_log(name, &out.log)?;
        run.emit_record("ablation", &row)?;
        table.push(row);
    }
    write_csv(&run.path("ablation.csv"), &table)
}

fn verify(run: &mut Run) -> Result<()> {
    let world = run.world(false)?;
    let prepared = run.prepare(&world, run.cfg.pipeline.proxy.kind)?;
    let v = &run.cfg.verify;
    let theorem = theorem_on_snapshots(&world, &run.cfg.pipeline, &prepared, &v.snapshots)?;
    let lemma = verify_lemma1(v.lemma_trials, &v.lemma_dims, v.lemma_seed);
    write_json(&run.path("theorem.json"), &theorem)?;
    write_json(&run.path("lemma.json"), &lemma)?;
    let summary = VerifySummary {
        theorem_snapshots: theorem.snapshots,
        theorem_applicable: theorem.applicable,
        theorem_violations: theorem.violations,
        theorem_worst_inner_product: theorem.worst_inner_product,
        theorem_worst_relative: theorem.worst_relative,
        theorem_fd_max_rel_error: theorem.fd_max_rel_error,
        lemma_instances: lemma.records.len(),
        lemma_violations: lemma.violations,
        lemma_worst_margin: lemma.worst_margin,
        lemma_projection_violations: lemma.projection_violations,
        passed: theorem.violations == 0 && lemma.passed,
    };
    write_json(&run.path("verify.json"), &summary)?;
    run.emit_record("verify", &summary)
}

/// Executes `cfg.mode`, writing the config echo, world hash and the mode's
/// outputs under `cfg.out`, and streaming metrics to `stdout` as JSON lines.
pub fn run(cfg: &ExperimentConfig, stdout: &mut dyn Write) -> Result<()> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| RunError::io(&cfg.out, e))?;
    write_file(&cfg.out.join(CONFIG_ECHO), echo(cfg)?.as_bytes())?;
    let mut run = Run { cfg, stdout };
    match cfg.mode {
        Mode::GenData => run.world(true).map(|_| ()),
        Mode::Train => train(&mut run),
        Mode::Eval => eval(&mut run),
        Mode::Sweep => sweep(&mut run),
        Mode::Verify => verify(&mut run),
        Mode::Ablate => ablate(&mut run),
    }
}
