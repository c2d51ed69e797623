//! The experiment configuration: a TOML file whose keys mirror
//! [`ExperimentConfig`], plus command-line overrides.

use std::path::{Path, PathBuf};

use bridge_core::eval::SnapshotPlan;
use bridge_core::synth::WorldSpec;
use bridge_core::train::pipeline::PipelineSettings;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RunError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    GenData,
    Train,
    Eval,
    Sweep,
    Verify,
    Ablate,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::GenData => "gen-data",
            Mode::Train => "train",
            Mode::Eval => "eval",
            Mode::Sweep => "sweep",
            Mode::Verify => "verify",
            Mode::Ablate => "ablate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { lambdas: vec![0.0, 0.1, 0.3, 1.0, 3.0, 10.0, 100.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub snapshots: SnapshotPlan,
    /// Lemma instances per dimension.
    pub lemma_trials: usize,
    pub lemma_dims: Vec<usize>,
    pub lemma_seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            snapshots: SnapshotPlan::default(),
            lemma_trials: 250,
            lemma_dims: vec![2, 4, 8, 32],
            lemma_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub out: PathBuf,
    pub world: WorldSpec,
    pub pipeline: PipelineSettings,
    pub sweep: SweepConfig,
    pub verify: VerifyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Train,
            out: PathBuf::from("runs/default"),
            world: WorldSpec::default(),
            pipeline: PipelineSettings::default(),
            sweep: SweepConfig::default(),
            verify: VerifyConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// `key=value` pairs with dotted keys, applied last.
    pub set: Vec<String>,
}

/// Parses an override value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(RunError::Config(format!("malformed override key `{key}`")));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur =
            entry.as_table_mut().ok_or_else(|| RunError::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Reads `path` (or starts from defaults), applies the overrides and
/// validates the result. Error messages name the offending key.
pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<ExperimentConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| RunError::io(p, e))?;
            text.parse::<toml::Table>().map_err(|e| RunError::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    if let Some(m) = ov.mode {
        table.insert("mode".into(), toml::Value::String(m.name().into()));
    }
    if let Some(o) = &ov.out {
        table.insert("out".into(), toml::Value::String(o.display().to_string()));
    }
    if let Some(s) = ov.seed {
        let seed =
            i64::try_from(s).map_err(|_| RunError::Config(format!("seed {s} does not fit in a TOML integer")))?;
        set_path(&mut table, "pipeline.seed", toml::Value::Integer(seed))?;
    }
    for item in &ov.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| RunError::Config(format!("override `{item}` is not of the form key=value")))?;
        set_path(&mut table, k.trim(), parse_value(v.trim()))?;
    }
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let key = e.path().to_string();
        RunError::Config(format!("key `{key}`: {}", e.into_inner()))
    })?;
    cfg.world.validate().map_err(|e| RunError::Config(format!("world: {e}")))?;
    cfg.pipeline.validate().map_err(|e| RunError::Config(format!("pipeline: {e}")))?;
    Ok(cfg)
}

/// The resolved configuration as TOML; loading it back reproduces the run.
pub fn echo(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| RunError::Config(format!("cannot serialize config: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with(set: &[&str]) -> Result<ExperimentConfig> {
        load(None, &Overrides { set: set.iter().map(|s| s.to_string()).collect(), ..Overrides::default() })
    }

    #[test]
    fn defaults_round_trip_through_the_echo() {
        let cfg = with(&[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let back: ExperimentConfig = toml::from_str(&echo(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = with(&["pipeline.stage3.lambda=2.5", "pipeline.proxy.kind=\"mlp\"", "world.num_classes=4"]).unwrap();
        assert_eq!(cfg.pipeline.stage3.lambda, 2.5);
        assert_eq!(cfg.pipeline.proxy.kind, bridge_core::proxy::ProxyKind::Mlp);
        assert_eq!(cfg.world.num_classes, 4);
        // bare words fall back to strings
        assert_eq!(with(&["mode=sweep"]).unwrap().mode, Mode::Sweep);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = with(&["pipeline.stage3.lamda=1"]).unwrap_err();
        assert!(err.to_string().contains("lamda"), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let err = with(&["pipeline.stage3.lambda=-1"]).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(with(&["novalue"]).is_err());
    }
}
