use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the toolkit.
///
/// The variants line up with the failure classes callers need to tell apart:
/// bad shapes, bad parameters, non-finite numerics, model state, and IO.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("parameter error: {0}")]
    Param(String),

    #[error("numeric error in {location}: non-finite value")]
    NonFinite { location: String },

    #[error("state error: {0}")]
    State(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Training { step: usize, loss: f64 },

    #[error("sampling produced a non-finite state at step {step} (t={t})")]
    Sampling { step: usize, t: usize },

    #[error("calibration error in {block}: {reason}")]
    Calibration { block: String, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("csv error: {0}")]
    Csv(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Load-side failures of the checkpoint container.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnknownVersion(u32),
    #[error("crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("unsupported dtype code {0}")]
    UnknownDtype(u8),
    #[error("malformed entry: {0}")]
    Malformed(String),
    #[error("missing tensor {0:?}")]
    Missing(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag used in machine-readable CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Param(_) => "param",
            Error::NonFinite { .. } => "numeric",
            Error::State(_) => "state",
            Error::Training { .. } => "training",
            Error::Sampling { .. } => "sampling",
            Error::Calibration { .. } => "calibration",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Csv(_) => "csv",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
