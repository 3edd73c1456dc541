//! Experiment runner for the `blockquant` library.
//!
//! Each subcommand reads one JSON config (see [`config`]), computes its
//! results fully in memory and then writes them into the output directory.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use config::{parse_run_config, Command, OutputFormat, Overrides, RunConfig};
use error::{io_error, CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "blockquant",
    version,
    about = "Block-format quantization experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
    /// JSON run config; relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory (default: ./out).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<OutputFormat>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Cmd {
    /// Cast a tensor file and report the quantization error.
    Quantize,
    /// Accuracy, loss and memory density of a model under a config.
    Eval,
    /// Per-site memory and arithmetic density of a config.
    Density,
    /// Variance of the unbounded intermediates of each layer.
    Profile,
    /// Mixed-precision TPE search.
    Search,
    /// Filter a trial log and summarize it.
    Report,
    /// Write a model file.
    BuildModel,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Quantize => Command::Quantize,
            Cmd::Eval => Command::Eval,
            Cmd::Density => Command::Density,
            Cmd::Profile => Command::Profile,
            Cmd::Search => Command::Search,
            Cmd::Report => Command::Report,
            Cmd::BuildModel => Command::BuildModel,
        }
    }
}

/// Loads the config of `cli` and applies its flags.
pub fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let command = Command::from(cli.command);
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            let mut cfg = parse_run_config(&text, command)?;
            cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
            cfg
        }
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: cli.seed,
        workers: cli.workers,
        out: cli.out.clone(),
        output_format: cli.format,
    });
    Ok(cfg)
}

/// Runs one command to completion and returns the files written and the
/// summary line.
pub fn run(cli: &Cli) -> CliResult<(Vec<PathBuf>, String)> {
    let cfg = load_config(cli)?;
    let command = Command::from(cli.command);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.workers {
        if n == 0 {
            return Err(CliError::Config("workers must be positive".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let out = pool.install(|| commands::execute(command, &cfg))?;
    let written = out.files.write(&cfg.out_dir())?;
    Ok((written, out.summary))
}
