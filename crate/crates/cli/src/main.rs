//! `eclip` drives the pipeline: synth-gen -> preprocess -> train -> eval,
//! plus a `verify` subcommand running the oracle self-checks.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error.

mod config;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

pub fn runtime_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Parser)]
#[command(name = "eclip", version, about = "Contrastive product-embedding pipeline")]
struct Cli {
    /// Run-configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the seed (also honours ECLIP_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory (also honours ECLIP_OUT).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Force the deterministic single-threaded mode.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into the dataset directory.
    SynthGen,
    /// Clean the dataset: validity rules plus dedup passes.
    Preprocess,
    /// Train the dual encoders with the scheduled accumulation loop.
    Train,
    /// Evaluate a trained checkpoint on the configured tasks.
    Eval,
    /// Run the oracle self-check suite.
    Verify,
}

/// Only the seed and output directory may come from the environment.
fn apply_overrides(cfg: &mut RunConfig, cli: &Cli) -> Result<(), CliError> {
    if let Ok(value) = std::env::var("ECLIP_SEED") {
        cfg.seed = value
            .parse()
            .map_err(|_| CliError::Config(format!("ECLIP_SEED: '{value}' is not a seed")))?;
    }
    if let Ok(value) = std::env::var("ECLIP_OUT") {
        cfg.out_dir = PathBuf::from(value);
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    Ok(())
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required for this subcommand".into()))?;
    let mut cfg = RunConfig::load(path).map_err(CliError::Config)?;
    apply_overrides(&mut cfg, cli)?;
    cfg.validate().map_err(CliError::Config)?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match cli.command {
        Command::SynthGen => stages::run_synth_gen(&load_config(cli)?),
        Command::Preprocess => stages::run_preprocess(&load_config(cli)?),
        Command::Train => stages::run_train(&load_config(cli)?),
        Command::Eval => stages::run_eval(&load_config(cli)?),
        Command::Verify => stages::run_verify(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
    }
}
