//! Maps between unconstrained optimisation vectors and feasible parameters.
//!
//! Persistence pairs use `s = sigmoid(p)`, `phi = sigmoid(q)`, `a = s phi`,
//! `b = s (1 - phi)`, so `a, b >= 0` and `a + b < 1` for every finite input.
//! Diagonals of `C` are `softplus(d) + 1e-6`; GARCH intercepts are
//! `softplus(w) + 1e-8`.

use crate::error::{Error, Result};
use crate::garch::{ScalarBekkParams, UnivariateGarchParams};
use crate::linalg::{tri_dim, tri_len, LowerTriangular};
use crate::lstm::{sigmoid, LstmWeights};
use crate::lstm_bekk::{LstmBekkParams, MIN_C_DIAG};

pub const MIN_OMEGA: f64 = 1e-8;

/// Keeps inverse maps finite when a target sits on the boundary.
const EDGE: f64 = 1e-12;

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
#[inline]
pub fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `(p, q) -> (a, b)`.
pub fn persistence_from_free(p: f64, q: f64) -> (f64, f64) {
    let s = sigmoid(p);
    let phi = sigmoid(q);
    (s * phi, s * (1.0 - phi))
}

/// `(a, b) -> (p, q)`; boundary values are pulled inside by `1e-12`.
pub fn persistence_to_free(a: f64, b: f64) -> Result<(f64, f64)> {
    if !(a >= 0.0 && b >= 0.0 && a + b < 1.0) {
        return Err(Error::Constraint(format!("(a, b) = ({a}, {b}) is not in the stationary region")));
    }
    let s = (a + b).clamp(EDGE, 1.0 - EDGE);
    let phi = if a + b > 0.0 { a / (a + b) } else { 0.5 };
    Ok((logit(s), logit(phi.clamp(EDGE, 1.0 - EDGE))))
}

/// Chain rule from `(da, db)` to `(dp, dq)`.
pub fn persistence_backprop(p: f64, q: f64, da: f64, db: f64) -> (f64, f64) {
    let s = sigmoid(p);
    let phi = sigmoid(q);
    let ds = s * (1.0 - s);
    let dphi = phi * (1.0 - phi);
    (
        ds * (phi * da + (1.0 - phi) * db),
        s * dphi * (da - db),
    )
}

/// Packed lower triangle with diagonal entries in softplus coordinates.
pub fn chol_from_free(free: &[f64]) -> Result<LowerTriangular> {
    let mut l = LowerTriangular::from_packed(free.to_vec())?;
    for i in 0..l.dim() {
        let d = l.get(i, i);
        l.set(i, i, softplus(d) + MIN_C_DIAG);
    }
    Ok(l)
}

pub fn chol_to_free(c: &LowerTriangular) -> Vec<f64> {
    let mut l = c.clone();
    for i in 0..l.dim() {
        let d = (l.get(i, i) - MIN_C_DIAG).max(EDGE);
        l.set(i, i, inv_softplus(d));
    }
    l.packed().to_vec()
}

/// Turns `dL/dC` (packed) into the gradient with respect to the free values.
pub fn chol_backprop(free: &[f64], d_c: &mut [f64]) {
    let n = tri_dim(free.len()).unwrap_or(0);
    for i in 0..n {
        let k = i * (i + 1) / 2 + i;
        d_c[k] *= sigmoid(free[k]);
    }
}

/// Free layout: packed `C`, then `p`, `q`.
pub fn bekk_from_free(theta: &[f64], n: usize) -> Result<ScalarBekkParams> {
    let m = tri_len(n);
    check_len(theta, m + 2)?;
    let (a, b) = persistence_from_free(theta[m], theta[m + 1]);
    Ok(ScalarBekkParams {
        c: chol_from_free(&theta[..m])?,
        a,
        b,
    })
}

pub fn bekk_to_free(p: &ScalarBekkParams) -> Result<Vec<f64>> {
    let mut out = chol_to_free(&p.c);
    let (fp, fq) = persistence_to_free(p.a, p.b)?;
    out.extend([fp, fq]);
    Ok(out)
}

/// Free layout: packed `C`, `p`, `q`, then the flattened LSTM weights.
pub fn lstm_bekk_from_free(theta: &[f64], template: &LstmWeights) -> Result<LstmBekkParams> {
    let n = template.dim();
    let m = tri_len(n);
    check_len(theta, m + 2 + template.num_params())?;
    let (a, b) = persistence_from_free(theta[m], theta[m + 1]);
    let mut lstm = template.clone();
    lstm.assign_flat(&theta[m + 2..])?;
    Ok(LstmBekkParams {
        c: chol_from_free(&theta[..m])?,
        a,
        b,
        lstm,
    })
}

pub fn lstm_bekk_to_free(p: &LstmBekkParams) -> Result<Vec<f64>> {
    let mut out = chol_to_free(&p.c);
    let (fp, fq) = persistence_to_free(p.a, p.b)?;
    out.extend([fp, fq]);
    out.extend(p.lstm.flatten());
    Ok(out)
}

/// Free layout: `w`, `p`, `q`.
pub fn garch_from_free(theta: &[f64]) -> Result<UnivariateGarchParams> {
    check_len(theta, 3)?;
    let (alpha, beta) = persistence_from_free(theta[1], theta[2]);
    Ok(UnivariateGarchParams {
        omega: softplus(theta[0]) + MIN_OMEGA,
        alpha,
        beta,
    })
}

pub fn garch_to_free(g: &UnivariateGarchParams) -> Result<Vec<f64>> {
    if !(g.omega > MIN_OMEGA) {
        return Err(Error::Constraint(format!("omega = {} must exceed {MIN_OMEGA:e}", g.omega)));
    }
    let (p, q) = persistence_to_free(g.alpha, g.beta)?;
    Ok(vec![inv_softplus(g.omega - MIN_OMEGA), p, q])
}

fn check_len(theta: &[f64], expected: usize) -> Result<()> {
    if theta.len() != expected {
        return Err(Error::Argument(format!(
            "free parameter vector has length {}, expected {expected}",
            theta.len()
        )));
    }
    Ok(())
}
