//! `warpada`: synthetic data, gradient checks, adversarial augmentation,
//! training and evaluation from one TOML config.
//!
//! Exit codes: 0 success, 1 check or run failure, 2 usage or config error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or input files.
    Usage(String),
    /// A check failed or a run aborted.
    Failure(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failure(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failure(m) => f.write_str(m),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "warpada", version, about = "Adversarial time-warp augmentation for time-series classifiers")]
struct Cli {
    /// TOML run configuration; defaults apply to every missing key.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the config and WARPADA_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic source and target domains as manifests.
    Synth,
    /// Compare every analytic gradient with central differences.
    Gradcheck,
    /// Generate adversarial samples for a manifest with a trained model.
    Augment {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Source manifest (default: `data.train`).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// `ada`, `tada` or `tada_plus`.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Run the alternating training procedure and save a checkpoint.
    Train {
        /// Training manifest (default: `data.train`, else synthetic data).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// `erm`, `ada`, `tada` or `tada_plus`.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Per-domain macro-F1 and an embeddings table.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifests to score (default: `data.eval`).
        #[arg(long = "manifest")]
        manifests: Vec<PathBuf>,
    },
    /// Write the 64-dimensional features of every sample as CSV.
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "manifest")]
        manifests: Vec<PathBuf>,
    },
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Ok(v) = std::env::var("WARPADA_SEED") {
        cfg.seed = v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("WARPADA_SEED must be an unsigned integer, got {v:?}")))?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    match &cli.command {
        Command::Augment { mode: Some(m), .. } | Command::Train { mode: Some(m), .. } => cfg.mode = m.clone(),
        _ => {}
    }
    if cli.jobs == Some(0) {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve(&cli)?;
    let jobs = cli.jobs;
    match cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::Gradcheck => commands::gradcheck(&cfg),
        Command::Augment {
            checkpoint, manifest, ..
        } => commands::augment(&cfg, &checkpoint, manifest.as_deref(), jobs),
        Command::Train { manifest, .. } => commands::train(&cfg, manifest.as_deref(), jobs),
        Command::Eval { checkpoint, manifests } => commands::eval(&cfg, &checkpoint, &manifests, true),
        Command::ExportFeatures { checkpoint, manifests } => commands::eval(&cfg, &checkpoint, &manifests, false),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
