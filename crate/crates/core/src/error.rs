use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the registration toolkit.
#[derive(Error, Debug)]
pub enum Error {
    #[error("point cloud must contain at least one point")]
    EmptyCloud,

    #[error("non-finite coordinate at point {index}")]
    NonFinite { index: usize },

    #[error("length mismatch: {what} (expected {expected}, got {got})")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parameter layout mismatch: config expects {expected} parameters, got {got}")]
    LayoutMismatch { expected: usize, got: usize },

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("non-finite gradient at coordinate {index}; step rejected")]
    NonFiniteGradient { index: usize },

    #[error("non-finite loss ({term}); step aborted")]
    NonFiniteLoss { term: &'static str },

    #[error("high-resolution pool too small: need {needed} points, have {have}")]
    PoolTooSmall { needed: usize, have: usize },

    #[error("case has no {0}")]
    Missing(&'static str),

    #[error("grid too small for central differences: dims {dims:?}, need at least 3 per axis")]
    GridTooSmall { dims: [usize; 3] },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("stage order violation: {0}")]
    StageOrder(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
