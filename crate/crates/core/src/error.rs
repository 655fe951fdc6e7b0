use std::path::PathBuf;

use thiserror::Error;

/// Errors shared across the tensor engine, model, data pipeline and trainer.
#[derive(Error, Debug)]
pub enum FscnError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got shape {0}")]
    NonScalarLoss(String),

    #[error("{op}: operand must be strictly positive, found {value} at flat index {index}")]
    Domain {
        op: &'static str,
        value: f64,
        index: usize,
    },

    #[error("empty valid mask: no ground-truth pixels in (0, {cap}]")]
    EmptyMask { cap: f64 },

    #[error("non-finite gradient in parameter '{param}'")]
    NonFiniteGrad { param: String },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FscnError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FscnError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        FscnError::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, FscnError>;
