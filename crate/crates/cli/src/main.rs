use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

mod commands;
mod config;
mod manifest;

/// Preference-optimization lab: datasets, training, self-checks and sweeps.
#[derive(Parser)]
#[command(name = "c3dpo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic preference dataset.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a policy and write per-step metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the numerical self-checks; exits 1 if any fails.
    Verify {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the collapse experiment over seeds, variants and lambdas.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Summarize a finished run directory.
    Report {
        run_dir: PathBuf,
    },
}

/// A self-check or acceptance condition did not hold.
#[derive(Debug)]
pub struct CheckFailure(pub String);

impl std::fmt::Display for CheckFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<CheckFailure>().is_some() {
            return 1;
        }
        if let Some(c3dpo::Error::NumericalFailure { .. }) = cause.downcast_ref::<c3dpo::Error>() {
            return 3;
        }
    }
    2
}

pub fn ensure_out_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))?;
    if !out.is_dir() {
        bail!("{} is not a directory", out.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { config, out, seed } => commands::gen(&config, &out, seed),
        Command::Train { config, out, seed } => commands::train(&config, &out, seed),
        Command::Verify { out, seed } => commands::verify(out.as_deref(), seed),
        Command::Sweep { config, out, seed, jobs } => commands::sweep(&config, &out, seed, jobs),
        Command::Report { run_dir } => commands::report(&run_dir),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
