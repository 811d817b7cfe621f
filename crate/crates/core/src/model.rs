//! Uniform access to the three covariance models.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::garch::{
    bekk_filter, bekk_step, dcc_advance, dcc_filter, Carry, CovPath, DccParams, ScalarBekkParams,
};
use crate::linalg::{Matrix, SpdMatrix};
use crate::lstm_bekk::{forecast_one_step, lstm_bekk_filter_from, LstmBekkParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    ScalarBekk,
    Dcc,
    LstmBekk,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::ScalarBekk, ModelKind::Dcc, ModelKind::LstmBekk];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::ScalarBekk => "scalar_bekk",
            ModelKind::Dcc => "dcc",
            ModelKind::LstmBekk => "lstm_bekk",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scalar_bekk" => Ok(ModelKind::ScalarBekk),
            "dcc" => Ok(ModelKind::Dcc),
            "lstm_bekk" => Ok(ModelKind::LstmBekk),
            other => Err(Error::Argument(format!(
                "unknown model '{other}' (expected scalar_bekk, dcc or lstm_bekk)"
            ))),
        }
    }
}

/// Constrained parameters of any of the three models.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams {
    ScalarBekk(ScalarBekkParams),
    Dcc(DccParams),
    LstmBekk(LstmBekkParams),
}

impl ModelParams {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelParams::ScalarBekk(_) => ModelKind::ScalarBekk,
            ModelParams::Dcc(_) => ModelKind::Dcc,
            ModelParams::LstmBekk(_) => ModelKind::LstmBekk,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ModelParams::ScalarBekk(p) => p.dim(),
            ModelParams::Dcc(p) => p.dim(),
            ModelParams::LstmBekk(p) => p.dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelParams::ScalarBekk(p) => p.validate(),
            ModelParams::Dcc(p) => p.validate(),
            ModelParams::LstmBekk(p) => p.validate(),
        }
    }

    /// The `(a, b)` pair of the covariance (BEKK) or correlation (DCC) recursion.
    pub fn persistence_pair(&self) -> (f64, f64) {
        match self {
            ModelParams::ScalarBekk(p) => (p.a, p.b),
            ModelParams::Dcc(p) => (p.a, p.b),
            ModelParams::LstmBekk(p) => (p.a, p.b),
        }
    }

    /// Carry at the model's own long-run level, used to start simulations.
    pub fn unconditional_carry(&self) -> Carry {
        match self {
            ModelParams::ScalarBekk(p) => Carry::Bekk { h: p.unconditional() },
            ModelParams::Dcc(p) => Carry::Dcc(p.unconditional_carry()),
            ModelParams::LstmBekk(p) => p.initial_carry(p.static_unconditional()),
        }
    }

    /// Filters `returns` starting from `init` (the state for the first row).
    pub fn filter(&self, returns: &[f64], init: &Carry) -> Result<CovPath> {
        match (self, init) {
            (ModelParams::ScalarBekk(p), Carry::Bekk { h }) => {
                bekk_filter(p, returns, &SpdMatrix::new(h.clone())?)
            }
            (ModelParams::Dcc(p), Carry::Dcc(c)) => dcc_filter(p, returns, c),
            (ModelParams::LstmBekk(p), c @ Carry::LstmBekk { .. }) => {
                lstm_bekk_filter_from(p, returns, c)
            }
            _ => Err(Error::Argument(format!("carry does not belong to a {} model", self.kind()))),
        }
    }

    /// Consumes one observation and returns the covariance for the next.
    pub fn advance(&self, carry: &mut Carry, r: &[f64]) -> Result<Matrix> {
        match (self, carry) {
            (ModelParams::ScalarBekk(p), Carry::Bekk { h }) => {
                *h = bekk_step(&p.omega(), None, p.a, p.b, r, h);
                Ok(h.clone())
            }
            (ModelParams::Dcc(p), carry @ Carry::Dcc(_)) => {
                let Carry::Dcc(c) = carry else { unreachable!() };
                dcc_advance(p, c, r, 0)?;
                Ok(carry.covariance())
            }
            (ModelParams::LstmBekk(p), carry @ Carry::LstmBekk { .. }) => {
                forecast_one_step(p, carry, r)
            }
            (s, _) => Err(Error::Argument(format!("carry does not belong to a {} model", s.kind()))),
        }
    }
}
