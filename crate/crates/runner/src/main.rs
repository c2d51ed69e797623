use std::path::PathBuf;
use std::process::ExitCode;

use bridge_runner::{load, run, Mode, Overrides};
use clap::Parser;

/// Train, evaluate and verify cross-modal bridges on synthetic worlds.
#[derive(Debug, Parser)]
#[command(name = "bridge", version)]
struct Cli {
    /// TOML experiment configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master training seed (`pipeline.seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Override any config key, e.g. `--set pipeline.stage3.lambda=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ov = Overrides { mode: cli.mode, seed: cli.seed, out: cli.out, set: cli.set };
    let result = load(cli.config.as_deref(), &ov).and_then(|cfg| {
        let mut stdout = std::io::stdout().lock();
        run(&cfg, &mut stdout)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            let report = anyhow::Error::new(e).context("bridge run failed");
            eprintln!("error: {report:#}");
            ExitCode::from(u8::try_from(code).unwrap_or(1))
        }
    }
}
