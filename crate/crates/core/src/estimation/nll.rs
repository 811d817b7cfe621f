//! Gaussian negative log-likelihood of a covariance path.
//!
//! Each term is `0.5 (n ln 2pi + ln|H_t| + r_t' H_t^{-1} r_t)`. A covariance
//! that fails Cholesky is retried with `eps tr(H)/n` added to its diagonal,
//! `eps` running through `1e-8, 1e-7, 1e-6, 1e-5`.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::linalg::{cholesky, factor_logdet_quadform, LowerTriangular, Matrix};

pub const JITTER_BASE: f64 = 1e-8;
pub const JITTER_ESCALATIONS: u32 = 3;
/// Jitter above this relative level sets the warning flag on a fit.
pub const JITTER_WARN: f64 = 1e-6;

/// Cholesky factor plus the relative jitter that was needed (0 if none).
#[derive(Debug, Clone)]
pub struct Factor {
    pub chol: LowerTriangular,
    pub jitter: f64,
}

pub fn factor_with_jitter(h: &Matrix, step: usize) -> Result<Factor> {
    if let Ok(chol) = cholesky(h) {
        return Ok(Factor { chol, jitter: 0.0 });
    }
    let n = h.rows();
    let scale = h.trace() / n as f64;
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Numeric {
            step,
            message: format!("covariance has non-positive or non-finite trace {}", h.trace()),
        });
    }
    let mut level = JITTER_BASE;
    for _ in 0..=JITTER_ESCALATIONS {
        let mut hj = h.clone();
        for i in 0..n {
            hj.set(i, i, h.get(i, i) + level * scale);
        }
        if let Ok(chol) = cholesky(&hj) {
            return Ok(Factor { chol, jitter: level });
        }
        level *= 10.0;
    }
    Err(Error::Numeric {
        step,
        message: format!(
            "covariance not positive definite even with jitter {:e} tr(H)/n",
            level / 10.0
        ),
    })
}

#[inline]
fn constant(n: usize) -> f64 {
    n as f64 * (2.0 * PI).ln()
}

/// Summary of an NLL evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllValue {
    /// Per-observation average.
    pub mean: f64,
    pub sum: f64,
    pub count: usize,
    /// Largest relative jitter used on any step.
    pub max_jitter: f64,
}

impl NllValue {
    pub fn jitter_warning(&self) -> bool {
        self.max_jitter > JITTER_WARN
    }

    pub(crate) fn from_terms(sum: f64, count: usize, max_jitter: f64) -> Self {
        Self {
            mean: sum / count as f64,
            sum,
            count,
            max_jitter,
        }
    }
}

/// One NLL term and the jitter it needed.
pub fn step_loss(h: &Matrix, r: &[f64], step: usize) -> Result<(f64, f64)> {
    let f = factor_with_jitter(h, step)?;
    let (logdet, quad) = factor_logdet_quadform(&f.chol, r);
    Ok((0.5 * (constant(r.len()) + logdet + quad), f.jitter))
}

/// Per-step NLL terms of `path` against `returns` (row-major, one row per matrix).
pub fn nll_terms(path: &[Matrix], returns: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = path.first().map(Matrix::rows).unwrap_or(0);
    if n == 0 || returns.len() != path.len() * n {
        return Err(Error::Argument(format!(
            "{} covariances do not match {} return values",
            path.len(),
            returns.len()
        )));
    }
    let mut max_jitter = 0.0f64;
    let mut terms = Vec::with_capacity(path.len());
    for (t, (h, r)) in path.iter().zip(returns.chunks_exact(n)).enumerate() {
        let (l, j) = step_loss(h, r, t)?;
        max_jitter = max_jitter.max(j);
        terms.push(l);
    }
    Ok((terms, max_jitter))
}

/// Average Gaussian NLL per observation, constant included.
pub fn gaussian_nll(path: &[Matrix], returns: &[f64]) -> Result<NllValue> {
    let (terms, max_jitter) = nll_terms(path, returns)?;
    Ok(NllValue::from_terms(terms.iter().sum(), terms.len(), max_jitter))
}

/// Loss term, `scale * dl/dH = scale * 0.5 (H^{-1} - u u')` with `u = H^{-1} r`,
/// and the jitter used.
pub(crate) fn step_loss_grad(h: &Matrix, r: &[f64], step: usize, scale: f64) -> Result<(f64, Matrix, f64)> {
    let f = factor_with_jitter(h, step)?;
    let (logdet, quad) = factor_logdet_quadform(&f.chol, r);
    let loss = 0.5 * (constant(r.len()) + logdet + quad);
    let u = f.chol.solve(r);
    let mut g = f.chol.inverse_of_outer();
    let n = r.len();
    let half = 0.5 * scale;
    for i in 0..n {
        for j in 0..n {
            let v = half * (g.get(i, j) - u[i] * u[j]);
            g.set(i, j, v);
        }
    }
    Ok((loss, g, f.jitter))
}
