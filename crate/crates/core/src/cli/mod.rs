//! Command-line front end: data generation, training, evaluation, gradient
//! checks, heatmap export and the full comparison experiment.
//!
//! Exit codes: 0 success, 1 failed check, 2 usage error, 3 I/O or corrupt data.

mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::Error;
use crate::harness::Mode;
use config::{DataFlags, TrainFlags};

pub use commands::{ExperimentCheck, ExperimentReport};
pub use manifest::{hash_path, RunManifest, RUN_MANIFEST};

#[derive(Debug, Parser)]
#[command(name = "spatialkd", version, about = "Spatial knowledge distillation on synthetic staging data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        data: DataFlags,
        /// TOML config file
        #[arg(long)]
        config: Option<PathBuf>,
    },

    /// Train a teacher or student and save a checkpoint
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory to create
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Teacher checkpoint, required in student-distilled mode
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Hold this fold out and train on the rest
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        config: Option<PathBuf>,
    },

    /// Evaluate a checkpoint and write a metrics CSV
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Evaluate only this fold (default: every sample)
        #[arg(long)]
        fold: Option<usize>,
        /// With --fold, evaluate the other folds instead
        #[arg(long, requires = "fold")]
        complement: bool,
        #[arg(long)]
        out: PathBuf,
    },

    /// Compare autodiff gradients with central finite differences
    Gradcheck {
        /// Restrict the run to one op
        #[arg(long)]
        op: Option<String>,
        #[arg(long, default_value_t = crate::gradcheck::suite::DEFAULT_CONFIGURATIONS)]
        configurations: usize,
        #[arg(long, default_value = "gradcheck")]
        out: PathBuf,
        /// Perturb this op's gradient (negative control)
        #[arg(long, hide = true)]
        inject_bug: Option<String>,
    },

    /// Export Grad-CAM heatmaps as PGM plus an overlap CSV
    Heatmap {
        /// Model as TAG=CHECKPOINT_DIR; repeatable
        #[arg(long = "model", required = true, value_parser = parse_tagged)]
        models: Vec<(String, PathBuf)>,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated sample ids
        #[arg(long, value_delimiter = ',')]
        samples: Vec<String>,
        /// Without --samples, take samples from this fold
        #[arg(long)]
        fold: Option<usize>,
        /// Without --samples, export at most this many
        #[arg(long, default_value_t = 8)]
        limit: usize,
        #[arg(long)]
        out: PathBuf,
    },

    /// Teacher vs baseline vs distilled student over k folds and several seeds
    Experiment {
        #[arg(long)]
        out: PathBuf,
        /// Master seeds, comma-separated
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Folds trained concurrently
        #[arg(long)]
        jobs: Option<usize>,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn parse_tagged(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((tag, path)) if !tag.is_empty() && !path.is_empty() => Ok((tag.to_string(), PathBuf::from(path))),
        _ => Err(format!("expected TAG=PATH, got `{s}`")),
    }
}

/// Why a command stopped.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Usage(_) | CliError::Core(Error::Config(_)) => 2,
            CliError::Core(e) if e.is_data_error() => 3,
            CliError::Core(_) => 1,
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    commands::dispatch(cli.command)
}

/// Parses `args` (program name first) and runs, returning the exit code.
pub fn run_from<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code() as u8;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn main() -> ExitCode {
    ExitCode::from(run_from(std::env::args_os()))
}
