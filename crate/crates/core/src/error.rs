use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FtwaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FtwaError {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label {label} outside vocabulary of size {vocabulary}")]
    Label { label: usize, vocabulary: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("evaluation protocol error: {0}")]
    Protocol(String),

    #[error("training diverged at step {step}: non-finite {component}")]
    Divergence { step: usize, component: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl FtwaError {
    pub fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Self::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
