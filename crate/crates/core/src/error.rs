use std::path::PathBuf;

use lfda_autograd::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LfdaError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("routing error: {0}")]
    Routing(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("degenerate batch: train-mode normalization needs at least 2 samples, got {0}")]
    DegenerateBatch(usize),
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("non-finite value in loss term `{term}` at step {step}")]
    NonFinite { term: String, step: usize },
    #[error("loss component `{name}` is negative ({value})")]
    NegativeComponent { name: String, value: f64 },
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
}

pub type Result<T> = std::result::Result<T, LfdaError>;

impl LfdaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LfdaError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        LfdaError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
