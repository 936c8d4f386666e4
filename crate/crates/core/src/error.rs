use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ArgusError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ArgusError {
    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{malformed} of {total} event lines are malformed (first: line {first_line}: {first_error})")]
    MalformedEvents { malformed: usize, total: usize, first_line: usize, first_error: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid feedback: {0}")]
    Feedback(String),

    #[error("unknown id: {0}")]
    UnknownId(String),

    #[error("count-min sketch is empty")]
    EmptySketch,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("no impression pairs found: {0}")]
    NoPairs(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ArgusError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}
