//! The LSTM-BEKK recursion
//!
//! ```text
//! H_t = C C' + C_t C_t' + a r_{t-1} r_{t-1}' + b H_{t-1}
//! ```
//!
//! where `C_t` comes from the stacked LSTM of [`crate::lstm`] fed with
//! `r_{t-1}`. With a zero LSTM output the recursion is exactly the Scalar
//! BEKK one; both go through the same elementwise update so the two paths
//! agree bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::garch::{bekk_step, check_persistence, check_rows, Carry, CovPath};
use crate::linalg::{cholesky, frobenius_norm, LowerTriangular, Matrix, SpdMatrix};
use crate::lstm::{build_ct, lstm_step, Dropout, LstmState, LstmWeights};

/// Smallest admissible diagonal entry of the static factor `C`.
pub const MIN_C_DIAG: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LstmBekkParams {
    pub c: LowerTriangular,
    pub a: f64,
    pub b: f64,
    pub lstm: LstmWeights,
}

impl LstmBekkParams {
    pub fn new(c: LowerTriangular, a: f64, b: f64, lstm: LstmWeights) -> Result<Self> {
        let p = Self { c, a, b, lstm };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        check_persistence(self.a, self.b)?;
        if self.c.diag().iter().any(|d| !(*d >= MIN_C_DIAG)) {
            return Err(Error::Constraint(format!("diagonal of C must be at least {MIN_C_DIAG:e}")));
        }
        if self.lstm.dim() != self.c.dim() {
            return Err(Error::Argument(format!(
                "LSTM width {} does not match {} assets",
                self.lstm.dim(),
                self.c.dim()
            )));
        }
        if !self.lstm.is_finite() {
            return Err(Error::Constraint("LSTM weights must be finite".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.c.dim()
    }

    pub fn omega(&self) -> Matrix {
        self.c.outer()
    }

    /// `CC' / (1 - a - b)`, used as the starting covariance for simulation.
    pub fn static_unconditional(&self) -> Matrix {
        self.omega().scale(1.0 / (1.0 - self.a - self.b))
    }

    /// Carry with covariance `h0` and a zero LSTM state.
    pub fn initial_carry(&self, h0: Matrix) -> Carry {
        Carry::LstmBekk {
            h: h0,
            lstm: LstmState::for_weights(&self.lstm),
        }
    }
}

/// `C_t C_t'` for the next step, plus the advanced LSTM state.
fn dynamic_term(params: &LstmBekkParams, state: &LstmState, r: &[f64]) -> Result<(LstmState, Matrix)> {
    let (next, ctilde) = lstm_step(&params.lstm, state, r, Dropout::Eval)?;
    let ct = build_ct(&ctilde, params.lstm.beta)?;
    Ok((next, ct.outer()))
}

fn advance(
    params: &LstmBekkParams,
    omega: &Matrix,
    h: &Matrix,
    state: &LstmState,
    r: &[f64],
) -> Result<(Matrix, LstmState)> {
    let (next_state, gamma) = dynamic_term(params, state, r)?;
    let next_h = bekk_step(omega, Some(&gamma), params.a, params.b, r, h);
    Ok((next_h, next_state))
}

/// Filters from a zero LSTM state with `h0` as the covariance of row 0.
pub fn lstm_bekk_filter(params: &LstmBekkParams, returns: &[f64], h0: &SpdMatrix) -> Result<CovPath> {
    if h0.dim() != params.dim() {
        return Err(Error::Argument("h0 dimension does not match C".into()));
    }
    lstm_bekk_filter_from(params, returns, &params.initial_carry(h0.values().clone()))
}

/// Filters starting from an arbitrary LSTM-BEKK carry.
pub fn lstm_bekk_filter_from(params: &LstmBekkParams, returns: &[f64], init: &Carry) -> Result<CovPath> {
    let Carry::LstmBekk { h, lstm } = init else {
        return Err(Error::Argument("LSTM-BEKK filter needs an LSTM-BEKK carry".into()));
    };
    let n = params.dim();
    let t_len = check_rows(returns, n)?;
    let omega = params.omega();
    let mut h = h.clone();
    let mut state = lstm.clone();
    let mut path = Vec::with_capacity(t_len);
    for (t, r) in returns.chunks_exact(n).enumerate() {
        let (next_h, next_state) = advance(params, &omega, &h, &state, r).map_err(|e| e.at_step(t))?;
        path.push(std::mem::replace(&mut h, next_h));
        state = next_state;
    }
    Ok(CovPath {
        h: path,
        carry: Carry::LstmBekk { h, lstm: state },
    })
}

/// Consumes the newest return, updates `carry` and returns `H_{t+1}`.
pub fn forecast_one_step(params: &LstmBekkParams, carry: &mut Carry, r: &[f64]) -> Result<Matrix> {
    let Carry::LstmBekk { h, lstm } = carry else {
        return Err(Error::Argument("LSTM-BEKK forecast needs an LSTM-BEKK carry".into()));
    };
    if r.len() != params.dim() {
        return Err(Error::Argument("return vector has the wrong length".into()));
    }
    let (next_h, next_state) = advance(params, &params.omega(), h, lstm, r)?;
    *h = next_h.clone();
    *lstm = next_state;
    Ok(next_h)
}

/// Monte-Carlo check of the expected-norm bound on `H_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoremBoundReport {
    pub k: usize,
    pub n_paths: usize,
    /// `a + b`.
    pub persistence: f64,
    /// `||mean over paths of H_k||_F`.
    pub lhs: f64,
    /// `(1 - s^k)/(1 - s) M + s^k ||H_0||_F` with `s = a + b`.
    pub rhs: f64,
    /// Largest `||CC' + C_t C_t'||_F` seen over all paths and steps.
    pub m: f64,
    pub h0_norm: f64,
}

impl TheoremBoundReport {
    /// Monte-Carlo slack factor `1 + 3/sqrt(paths)`.
    pub fn tolerance_factor(&self) -> f64 {
        1.0 + 3.0 / (self.n_paths as f64).sqrt()
    }

    /// `(1 - s^k)/(1 - s)`.
    pub fn geometric_weight(&self) -> f64 {
        geometric_weight(self.persistence, self.k)
    }

    /// `lhs <= rhs * (1 + 3/sqrt(paths))`.
    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs * self.tolerance_factor()
    }

    /// Stricter form with the slack applied to the initial-condition term only.
    pub fn holds_strict(&self) -> bool {
        let s_k = self.persistence.powi(self.k as i32);
        self.lhs <= self.geometric_weight() * self.m + s_k * self.h0_norm * self.tolerance_factor()
    }
}

fn geometric_weight(s: f64, k: usize) -> f64 {
    // sum_{j<k} s^j, written out so s = 0 is exact
    (0..k).fold((0.0, 1.0), |(acc, p), _| (acc + p, p * s)).0
}

/// Bound value for horizon `k` given `M`, `||H_0||` and persistence `s`.
pub fn theorem_rhs(s: f64, k: usize, m: f64, h0_norm: f64) -> f64 {
    geometric_weight(s, k) * m + s.powi(k as i32) * h0_norm
}

/// Simulates `n_paths` trajectories of length `k` from `H_0 = CC'/(1-a-b)`
/// and compares `||E H_k||_F` with the bound.
pub fn check_theorem_bound(
    params: &LstmBekkParams,
    n_paths: usize,
    k: usize,
    seed: u64,
) -> Result<TheoremBoundReport> {
    params.validate()?;
    if n_paths == 0 || k == 0 {
        return Err(Error::Argument("need at least one path and one step".into()));
    }
    let n = params.dim();
    let omega = params.omega();
    let h0 = params.static_unconditional();

    let per_path: Vec<Result<(Matrix, f64)>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(p as u64);
            let mut h = h0.clone();
            let mut state = LstmState::for_weights(&params.lstm);
            let mut m = 0.0f64;
            let mut r = vec![0.0; n];
            for step in 0..k {
                let l = cholesky(&h).map_err(|e| e.at_step(step))?;
                let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
                for i in 0..n {
                    r[i] = (0..=i).map(|j| l.get(i, j) * eps[j]).sum();
                }
                let (next_state, gamma) = dynamic_term(params, &state, &r)?;
                let mut static_plus_dynamic = omega.clone();
                static_plus_dynamic.add_scaled(1.0, &gamma);
                m = m.max(frobenius_norm(&static_plus_dynamic));
                h = bekk_step(&omega, Some(&gamma), params.a, params.b, &r, &h);
                state = next_state;
            }
            Ok((h, m))
        })
        .collect();

    let mut mean = Matrix::zeros(n, n);
    let mut m = 0.0f64;
    for (i, res) in per_path.into_iter().enumerate() {
        let (h, path_m) = res?;
        // running mean: identical inputs leave it unchanged bit for bit
        let w = 1.0 / (i + 1) as f64;
        for (acc, x) in mean.as_mut_slice().iter_mut().zip(h.as_slice()) {
            *acc += (x - *acc) * w;
        }
        m = m.max(path_m);
    }
    let s = params.a + params.b;
    let h0_norm = frobenius_norm(&h0);
    Ok(TheoremBoundReport {
        k,
        n_paths,
        persistence: s,
        lhs: frobenius_norm(&mean),
        rhs: theorem_rhs(s, k, m, h0_norm),
        m,
        h0_norm,
    })
}
