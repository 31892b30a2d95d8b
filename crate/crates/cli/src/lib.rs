//! `triage` command-line tool.
//!
//! Exit codes: 0 success, 1 invalid input or usage, 2 I/O failure.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("I/O error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl CliError {
    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        Self::Io { path: path.to_path_buf(), message: err.to_string() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Invalid(_) => 1,
            Self::Io { .. } => 2,
        }
    }
}

impl From<triage_core::dataset::DatasetError> for CliError {
    fn from(e: triage_core::dataset::DatasetError) -> Self {
        use triage_core::dataset::DatasetError;
        match e {
            DatasetError::Io { path, source } => Self::io(&path, source),
            other => Self::Invalid(other.to_string()),
        }
    }
}

impl From<triage_core::tessellation::TessellationError> for CliError {
    fn from(e: triage_core::tessellation::TessellationError) -> Self {
        use triage_core::tessellation::TessellationError;
        match e {
            TessellationError::Io { path, source } => Self::io(&path, source),
            other => Self::Invalid(other.to_string()),
        }
    }
}

impl From<triage_core::aggregator::ModelError> for CliError {
    fn from(e: triage_core::aggregator::ModelError) -> Self {
        use triage_core::aggregator::ModelError;
        match e {
            ModelError::Io { path, source } => Self::io(&path, source),
            other => Self::Invalid(other.to_string()),
        }
    }
}

impl From<triage_core::training::TrainError> for CliError {
    fn from(e: triage_core::training::TrainError) -> Self {
        match e {
            triage_core::training::TrainError::Model(m) => m.into(),
            other => Self::Invalid(other.to_string()),
        }
    }
}

impl From<triage_core::evaluation::EvalError> for CliError {
    fn from(e: triage_core::evaluation::EvalError) -> Self {
        use triage_core::evaluation::EvalError;
        match e {
            EvalError::Io { path, source } => Self::io(&path, source),
            other => Self::Invalid(other.to_string()),
        }
    }
}

impl From<triage_core::triage_sim::SimError> for CliError {
    fn from(e: triage_core::triage_sim::SimError) -> Self {
        Self::Invalid(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "triage", version, about = "Melanocytic lesion triage pipeline")]
pub struct Cli {
    /// Global seed; every stage derives its own seed from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

/// Flat `key = value` settings file plus overrides.
#[derive(Debug, Args, Clone, Default, serde::Serialize)]
pub struct SettingsArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `--set model_dim=64`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort (manifest, feature files, oracle scores).
    Synth {
        #[command(flatten)]
        settings: SettingsArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plan the tile grid of one slide from its segmentation mask.
    Tessellate {
        slide_id: String,
        /// PNG mask (0 background, 1 tissue, 2 pen) with a `.header` sidecar.
        #[arg(long)]
        mask: PathBuf,
        /// Slide size in pixels at the target magnification, `WIDTHxHEIGHT`.
        #[arg(long)]
        extent: String,
        #[arg(long, default_value_t = 4096)]
        tile_size: u32,
        #[arg(long, default_value = "0.05")]
        min_coverage: String,
        #[arg(long, default_value_t = 20.0)]
        magnification: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one fold's model.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        fold: usize,
        #[command(flatten)]
        settings: SettingsArgs,
        /// Use this split instead of deriving one from the seed.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Validation history CSV (default: next to the checkpoint).
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Split patients, then train one model per fold.
    TrainEnsemble {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        settings: SettingsArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ensemble probabilities for every case (or one split subset).
    Predict {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        split: Option<PathBuf>,
        /// `all`, `test` or `development`.
        #[arg(long, default_value = "all")]
        subset: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics with bootstrap intervals, curves and calibration.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        bootstrap: usize,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long, default_value = "0.95,0.98,0.99", value_delimiter = ',')]
        sensitivities: Vec<f64>,
        /// Also report on the cases carrying this tag.
        #[arg(long = "partition")]
        partitions: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Random versus triage-ranked case assignment.
    Simulate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        iterations: usize,
        #[arg(long, default_value_t = 5)]
        pathologists: usize,
        #[arg(long, default_value_t = 1)]
        experts: usize,
        #[arg(long, default_value_t = 100)]
        per_pathologist: usize,
        /// Report path; per-iteration counts go to `<stem>.iterations.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-tile attention weights of one case.
    Attention {
        #[arg(long = "case")]
        case_id: String,
        #[arg(long)]
        manifest: PathBuf,
        /// Several checkpoints average their attention maps.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
