use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("degenerate vector at row {row} (L2 norm below 1e-12)")]
    DegenerateVector { row: usize },

    #[error("invalid disentangling ratio {dr} for dimension {d}: DIR length would be {d_i}")]
    InvalidRatio { dr: f64, d: usize, d_i: usize },

    #[error("representation bank has no entry for instance {instance} view {view}")]
    MissingRepresentation { instance: u64, view: u32 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("malformed data in {path} at byte offset {offset}: {reason}")]
    Malformed {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("invalid config:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step} (lr {lr:e}): {diagnostics}")]
    NonFiniteLoss {
        step: u64,
        lr: f64,
        diagnostics: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

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

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
