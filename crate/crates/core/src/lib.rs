//! Multivariate volatility models with LSTM-driven dynamic BEKK covariances,
//! the Scalar BEKK and DCC baselines, maximum-likelihood estimation,
//! forecast evaluation and minimum-variance portfolio backtests.

pub mod data;
pub mod estimation;
pub mod evaluation;
pub mod error;
pub mod garch;
pub mod linalg;
pub mod lstm;
pub mod lstm_bekk;
pub mod model;
pub mod portfolio;
pub mod report;

pub use error::{Error, Result};
pub use model::{ModelKind, ModelParams};
