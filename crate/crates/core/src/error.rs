//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors raised by data ingestion, the covariance recursions and training.
#[derive(Debug, Error)]
pub enum Error {
    /// Cholesky factorisation hit a non-positive pivot.
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("ingestion error at row {row}, column '{column}': {message}")]
    Ingestion {
        row: usize,
        column: String,
        message: String,
    },

    #[error("dates are not strictly increasing at row {row} ('{previous}' then '{current}')")]
    Ordering {
        row: usize,
        previous: String,
        current: String,
    },

    #[error("insufficient data: need at least {needed} rows, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("constraint violated: {0}")]
    Constraint(String),

    /// A non-finite or out-of-range intermediate value.
    #[error("numeric error at step {step}: {message}")]
    Numeric { step: usize, message: String },

    #[error("training diverged at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Attaches a time index to errors that carry one.
    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            Error::NotPositiveDefinite { pivot, value } => Error::Numeric {
                step,
                message: format!("covariance not positive definite (pivot {pivot} = {value:e})"),
            },
            Error::Numeric { message, .. } => Error::Numeric { step, message },
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
