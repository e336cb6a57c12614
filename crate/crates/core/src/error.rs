use thiserror::Error;

use crate::tensors::Vector;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {operand}: expected {expected}, got {actual}")]
    Dimension {
        operand: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("{what} did not converge after {iterations} iterations (last change {last_change:.3e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        last_change: f64,
        last_iterate: Option<Vector>,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("matrix is singular or too ill-conditioned (condition number {condition:.3e})")]
    Singular { condition: f64 },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("training diverged at epoch {epoch}: loss {loss:.3e}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("config error at `{path}`: {reason}")]
    Config { path: String, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(operand: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Dimension {
            operand,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }
}
