use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input that violates a documented precondition (degenerate box, bad crop window, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("schema error in {record} at `{path}`: {message}")]
    Schema {
        record: String,
        path: String,
        message: String,
    },

    #[error("inconsistent labels in {track_id}: {message}")]
    InconsistentLabels { track_id: String, message: String },

    #[error("non-increasing frame index in {track_id} at frames[{index}]: {prev} -> {next}")]
    Monotonicity {
        track_id: String,
        index: usize,
        prev: u64,
        next: u64,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn schema(record: impl Into<String>, path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            record: record.into(),
            path: path.into(),
            message: message.into(),
        }
    }

    /// Whether the error stems from bad input data or configuration rather than a runtime fault.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::Schema { .. }
                | Error::InconsistentLabels { .. }
                | Error::Monotonicity { .. }
                | Error::Config(_)
                | Error::Json(_)
        )
    }
}
