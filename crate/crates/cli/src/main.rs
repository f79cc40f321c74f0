//! `jumphmm` command-line interface.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{execute, Run};
use crate::config::RunConfig;
use crate::error::{CliError, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(name = "jumphmm", version, about = "Fit, simulate, predict and validate hierarchical hidden Markov jump process models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Model JSON (input for every command but fit, where it is the starting point).
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Records CSV.
    #[arg(long, global = true)]
    records: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Random seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a model to records with EM.
    Fit,
    /// Simulate a cohort from a model.
    Simulate,
    /// Predict the last visit of each individual.
    Predict,
    /// Kaplan-Meier band, posterior predictive checks and risk bands.
    Validate,
    /// Compare the analytic M-step gradient with finite differences.
    CheckGradients,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Fit => "fit",
            Command::Simulate => "simulate",
            Command::Predict => "predict",
            Command::Validate => "validate",
            Command::CheckGradients => "check-gradients",
        }
    }
}

fn resolve(cli: Cli) -> Result<Run, CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(p) = cli.model {
        config.paths.model = Some(p);
    }
    if let Some(p) = cli.records {
        config.paths.records = Some(p);
    }
    if let Some(p) = cli.out {
        config.paths.out = Some(p);
    }
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    let threads = match cli.threads {
        Some(0) => return Err(CliError::usage("--threads must be at least 1")),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
    Ok(Run {
        command: cli.command.name(),
        seed: config.seed,
        out: config.paths.out.clone().unwrap_or_else(|| PathBuf::from(".")),
        config,
        config_path: cli.config,
        threads,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match resolve(cli).and_then(|run| execute(&run)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
