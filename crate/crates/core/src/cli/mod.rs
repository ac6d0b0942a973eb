//! `s6snn` command line: train, eval, analyze, gen-data.
//!
//! Exit codes: 0 success, 1 internal error, 2 config or data error, 3 integrity error.

pub mod commands;
pub mod config;
pub mod data;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::analysis::AnalysisError;
use crate::data::DataError;
use crate::io::ContainerError;
use crate::layers::Mode;
use crate::train::TrainError;

pub use config::{load_config, parse_config, RunConfig, OUTPUT_ROOT_ENV};
pub use manifest::Manifest;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Internal(_) => 1,
            CliError::Config(_) | CliError::Data(_) => 2,
            CliError::Integrity(_) => 3,
        }
    }
}

impl From<ContainerError> for CliError {
    fn from(e: ContainerError) -> Self {
        match e {
            ContainerError::Io { .. } => CliError::Data(e.to_string()),
            _ => CliError::Integrity(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Container(c) => c.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Incompatible(m) => CliError::Data(m),
            other => CliError::Internal(other.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Io { .. } => CliError::Internal(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

pub fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Internal(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "s6snn", version, about = "Stochastic spiking state-space networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a config (or replay a manifest); writes checkpoint, metrics and manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print metrics JSON.
    Eval(EvalArgs),
    /// Write spike statistics and the energy report for a checkpoint.
    Analyze(AnalyzeArgs),
    /// Generate a dataset container.
    GenData(GenDataArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run config JSON.
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    pub config: Option<PathBuf>,
    /// Manifest of an earlier run; its config is replayed.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Config override, `dotted.key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

/// Dataset selection shared by eval and analyze.
#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset container.
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    pub data: Option<PathBuf>,
    /// Run config whose data section supplies the dataset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Split of the config's data: train, val or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// train_sample, eval_sample, eval_expected or train_expected.
    #[arg(long, default_value = "eval_sample", value_parser = parse_mode)]
    pub mode: Mode,
    #[arg(long, default_value_t = 8)]
    pub repeats: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the metrics JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory; relative paths are placed under `$S6_OUTPUT_ROOT` when set.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "eval_sample", value_parser = parse_mode)]
    pub mode: Mode,
    #[arg(long, default_value_t = 4)]
    pub repeats: usize,
    #[arg(long, default_value_t = 16)]
    pub max_examples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum GenTask {
    Adding,
    Copy,
    Mnist,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub task: GenTask,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    #[arg(long, default_value_t = 256)]
    pub len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Copy task recall offset.
    #[arg(long)]
    pub lag: Option<usize>,
    #[arg(long, default_value_t = 8)]
    pub alphabet: usize,
    #[arg(long, default_value_t = 10)]
    pub payload: usize,
    /// MNIST IDX images (optionally gzip).
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Pixel permutation seed for MNIST; omit for sequential order.
    #[arg(long)]
    pub permutation_seed: Option<u64>,
}

pub fn parse_mode(s: &str) -> Result<Mode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
        format!("unknown mode `{s}`; expected train_sample, eval_sample, eval_expected or train_expected")
    })
}

/// Parses `args` (including the program name) and runs the command, returning the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::cmd_train(&a),
        Command::Eval(a) => commands::cmd_eval(&a),
        Command::Analyze(a) => commands::cmd_analyze(&a),
        Command::GenData(a) => commands::cmd_gen_data(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
