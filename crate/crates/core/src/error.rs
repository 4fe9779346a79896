use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("infeasible config: {0}")]
    InfeasibleConfig(String),

    #[error("infeasible coverage: {0}")]
    InfeasibleCoverage(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("CTC target infeasible: {frames} frames cannot emit a target needing {required}")]
    InfeasibleCtc { frames: usize, required: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("every target position is padding")]
    AllPadded,

    #[error("mask selects no frames")]
    EmptyMask,

    #[error("sequence of {frames} frames exceeds the configured maximum of {max}")]
    TooManyFrames { frames: usize, max: usize },

    #[error("attention row {row} sums to {sum}, not 1")]
    NotStochastic { row: usize, sum: f64 },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("world fingerprint mismatch: dataset has {found}, expected {expected}")]
    FingerprintMismatch { found: String, expected: String },

    #[error("eval split mismatch: {0}")]
    SplitMismatch(String),

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("checkpoint does not match config: {0}")]
    CheckpointMismatch(String),

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss { epoch: usize, step: usize, detail: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
