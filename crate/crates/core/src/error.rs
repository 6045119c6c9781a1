use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("sequence too short: need at least {needed} clips, got {got}")]
    SequenceTooShort { needed: usize, got: usize },

    #[error("{path}: bad magic {found:?}, expected {expected:?}")]
    Format {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("{path}: truncated file: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("clip count mismatch between modalities: visual has {visual} rows, audio has {audio}")]
    Alignment { visual: usize, audio: usize },

    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("AUC undefined: {0}")]
    UndefinedMetric(String),

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
}
