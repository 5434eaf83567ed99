//! Experiment runner for the `cafm` library: configuration files, training
//! and post-training runs, checkpoints, sampling, evaluation dumps and the
//! self-test suites.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod io;
pub mod selftest;

pub use checkpoint::{Checkpoint, CheckpointKind};
pub use config::RunConfig;

use cafm::trainer::TrainError;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("--cfg needs a class-conditional velocity model; this checkpoint is {0}")]
    CfgUnconditional(String),
    #[error("checkpoint has dimension {checkpoint} but preset {preset} has dimension {preset_dim}")]
    DimMismatch {
        checkpoint: usize,
        preset: String,
        preset_dim: usize,
    },
    #[error("{0}")]
    Usage(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Library(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn lib(e: impl std::fmt::Display) -> Self {
        CliError::Library(e.to_string())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod book_cli {}
