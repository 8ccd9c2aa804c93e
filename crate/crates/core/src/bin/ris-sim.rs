use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ris_core::harness::{self, ConfigError, ExperimentConfig, RunError};

/// Channel-estimation sweeps for RIS-assisted MIMO uplinks.
#[derive(Parser)]
#[command(name = "ris-sim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Seed for all random draws (overrides `mc.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file (overrides `output.path`); stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Mean CRB diagonal per sweep point.
    CrbSweep { config: PathBuf },
    /// Monte Carlo estimator MSE per sweep point.
    McMse { config: PathBuf },
    /// Dump one channel draw and training plan as JSON.
    Synth { config: PathBuf },
}

fn emit(out: Option<&Path>, body: &[u8], cfg: &ExperimentConfig) -> Result<(), RunError> {
    match out {
        Some(path) => {
            fs::write(path, body)?;
            let mut echo = path.as_os_str().to_owned();
            echo.push(".config.toml");
            fs::write(echo, cfg.echo())?;
        }
        None => std::io::stdout().write_all(body)?,
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), RunError> {
    let path = match &cli.command {
        Command::CrbSweep { config } | Command::McMse { config } | Command::Synth { config } => config,
    };
    let cfg = harness::load_config(path, cli.seed)?;
    if cli.threads == Some(0) {
        return Err(ConfigError { problems: vec!["--threads must be at least 1".into()] }.into());
    }
    let out = cli.out.clone().or_else(|| cfg.output.path.clone().map(PathBuf::from));
    let body = match cli.command {
        Command::CrbSweep { .. } => harness::run::csv_string(&harness::run_crb_sweep(&cfg, cli.threads)?),
        Command::McMse { .. } => harness::run::csv_string(&harness::run_mc_mse(&cfg, cli.threads)?),
        Command::Synth { .. } => {
            let v = harness::synth(&cfg)?;
            serde_json::to_string_pretty(&v).expect("JSON values serialize") + "\n"
        }
    };
    emit(out.as_deref(), body.as_bytes(), &cfg)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ris-sim: {e}");
            if let RunError::AllSkipped(rows) = &e {
                let _ = harness::write_csv(rows, std::io::stderr());
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
