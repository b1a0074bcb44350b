use thiserror::Error;

use crate::ContextId;

/// Errors raised across the library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeError { expected: usize, got: usize },

    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(String),

    #[error("invalid coefficient {name} = {value}: {reason}")]
    InvalidCoefficient {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("unknown context {0}")]
    UnknownContext(ContextId),

    #[error("label {label} out of range for vocabulary of size {vocab}")]
    InvalidLabel { label: usize, vocab: usize },

    #[error("unsupported: {0}")]
    Unsupported(&'static str),

    #[error("numerical divergence at step {step}: {detail}")]
    NumericalDivergence { step: usize, detail: String },

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::ShapeError { expected, got })
    }
}
