//! Scalar BEKK and DCC conditional covariance recursions.
//!
//! Every filter follows the same convention: the covariance stored at
//! position `t` of a [`CovPath`] is the one used for observation `t`, i.e.
//! it is conditional on rows `0..t` only. The covariance supplied as the
//! initial condition is therefore the one used for row 0, and the
//! [`Carry`] returned with the path holds whatever is needed to produce the
//! covariance for the row after the last one. Passing that carry back in
//! continues the recursion exactly, which is how validation and test spans
//! are evaluated with frozen parameters.

use crate::error::{Error, Result};
use crate::linalg::{cholesky, LowerTriangular, Matrix, SpdMatrix};
use crate::lstm::LstmState;

/// Largest standardized residual accepted by the DCC filter.
pub const MAX_STANDARDIZED: f64 = 1e6;

/// Parameters of `H_t = CC' + a r r' + b H_{t-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarBekkParams {
    pub c: LowerTriangular,
    pub a: f64,
    pub b: f64,
}

impl ScalarBekkParams {
    pub fn new(c: LowerTriangular, a: f64, b: f64) -> Result<Self> {
        let p = Self { c, a, b };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        check_persistence(self.a, self.b)?;
        if self.c.diag().iter().any(|d| !(*d > 0.0)) {
            return Err(Error::Constraint("diagonal of C must be positive".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.c.dim()
    }

    /// `CC'`.
    pub fn omega(&self) -> Matrix {
        self.c.outer()
    }

    /// Fixed point of the recursion, `CC' / (1 - a - b)`.
    pub fn unconditional(&self) -> Matrix {
        self.omega().scale(1.0 / (1.0 - self.a - self.b))
    }
}

/// `a, b >= 0` and `a + b < 1`.
pub fn check_persistence(a: f64, b: f64) -> Result<()> {
    if !(a >= 0.0 && b >= 0.0) {
        return Err(Error::Constraint(format!("a = {a} and b = {b} must be non-negative")));
    }
    if !(a + b < 1.0) {
        return Err(Error::Constraint(format!("a + b = {} must be below 1 for a stationary process", a + b)));
    }
    Ok(())
}

/// One univariate GARCH(1,1) variance equation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnivariateGarchParams {
    pub omega: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl UnivariateGarchParams {
    pub fn new(omega: f64, alpha: f64, beta: f64) -> Result<Self> {
        let p = Self { omega, alpha, beta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0) {
            return Err(Error::Constraint(format!("omega = {} must be positive", self.omega)));
        }
        check_persistence(self.alpha, self.beta)
    }

    /// `omega / (1 - alpha - beta)`.
    pub fn unconditional_variance(&self) -> f64 {
        self.omega / (1.0 - self.alpha - self.beta)
    }

    #[inline]
    pub fn next_variance(&self, r: f64, h: f64) -> f64 {
        self.omega + self.alpha * (r * r) + self.beta * h
    }
}

/// DCC parameters: per-asset GARCH equations plus correlation dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct DccParams {
    pub garch: Vec<UnivariateGarchParams>,
    pub a: f64,
    pub b: f64,
    /// Correlation target `S`.
    pub s: Matrix,
}

impl DccParams {
    pub fn new(garch: Vec<UnivariateGarchParams>, a: f64, b: f64, s: Matrix) -> Result<Self> {
        let p = Self { garch, a, b, s };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        check_persistence(self.a, self.b)?;
        for g in &self.garch {
            g.validate()?;
        }
        let n = self.garch.len();
        if self.s.rows() != n || self.s.cols() != n {
            return Err(Error::Argument(format!(
                "S is {}x{} but there are {n} GARCH equations",
                self.s.rows(),
                self.s.cols()
            )));
        }
        if self.s.diag().iter().any(|d| (d - 1.0).abs() > 1e-10) {
            return Err(Error::Constraint("S must have unit diagonal".into()));
        }
        SpdMatrix::new(self.s.clone())?;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.garch.len()
    }

    /// Carry at the unconditional variances with `Q = S`.
    pub fn unconditional_carry(&self) -> DccCarry {
        DccCarry {
            var: self.garch.iter().map(|g| g.unconditional_variance()).collect(),
            q: self.s.clone(),
        }
    }
}

/// State needed to continue a DCC recursion.
#[derive(Debug, Clone, PartialEq)]
pub struct DccCarry {
    /// Conditional variances `h_{i,t}` for the next observation.
    pub var: Vec<f64>,
    /// `Q_t` for the next observation.
    pub q: Matrix,
}

/// Model-specific state after the last filtered observation.
#[derive(Debug, Clone, PartialEq)]
pub enum Carry {
    Bekk { h: Matrix },
    Dcc(DccCarry),
    LstmBekk { h: Matrix, lstm: LstmState },
}

impl Carry {
    /// Covariance forecast for the next observation.
    pub fn covariance(&self) -> Matrix {
        match self {
            Carry::Bekk { h } | Carry::LstmBekk { h, .. } => h.clone(),
            Carry::Dcc(c) => dcc_covariance(&c.var, &c.q),
        }
    }
}

/// A filtered sequence of covariance matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct CovPath {
    pub h: Vec<Matrix>,
    pub carry: Carry,
}

impl CovPath {
    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }
}

pub(crate) fn check_rows(returns: &[f64], n: usize) -> Result<usize> {
    if n == 0 || returns.len() % n != 0 {
        return Err(Error::Argument(format!(
            "return buffer of length {} is not a whole number of {n}-asset rows",
            returns.len()
        )));
    }
    Ok(returns.len() / n)
}

/// `omega + dynamic + a r r' + b h`, summed in that order entry by entry.
pub(crate) fn bekk_step(
    omega: &Matrix,
    dynamic: Option<&Matrix>,
    a: f64,
    b: f64,
    r: &[f64],
    h: &Matrix,
) -> Matrix {
    let n = r.len();
    let mut out = Matrix::zeros(n, n);
    let o = omega.as_slice();
    let hs = h.as_slice();
    let dst = out.as_mut_slice();
    match dynamic {
        Some(d) => {
            let ds = d.as_slice();
            for i in 0..n {
                for j in 0..n {
                    let k = i * n + j;
                    dst[k] = o[k] + ds[k] + a * (r[i] * r[j]) + b * hs[k];
                }
            }
        }
        None => {
            for i in 0..n {
                for j in 0..n {
                    let k = i * n + j;
                    dst[k] = o[k] + a * (r[i] * r[j]) + b * hs[k];
                }
            }
        }
    }
    out
}

/// Filters a Scalar BEKK over `returns` (row-major, `T x n`).
///
/// `h0` is the covariance of row 0; the returned carry holds `H_T`.
pub fn bekk_filter(params: &ScalarBekkParams, returns: &[f64], h0: &SpdMatrix) -> Result<CovPath> {
    let n = params.dim();
    if h0.dim() != n {
        return Err(Error::Argument("h0 dimension does not match C".into()));
    }
    let t_len = check_rows(returns, n)?;
    let omega = params.omega();
    let mut h = h0.values().clone();
    let mut path = Vec::with_capacity(t_len);
    for r in returns.chunks_exact(n) {
        let next = bekk_step(&omega, None, params.a, params.b, r, &h);
        path.push(std::mem::replace(&mut h, next));
    }
    Ok(CovPath {
        h: path,
        carry: Carry::Bekk { h },
    })
}

/// Univariate GARCH variances for each observation plus the next-step forecast.
#[derive(Debug, Clone, PartialEq)]
pub struct GarchPath {
    pub h: Vec<f64>,
    pub next: f64,
}

/// `h_t = omega + alpha r_{t-1}^2 + beta h_{t-1}`, starting from `h0` for row 0.
pub fn garch_filter(params: &UnivariateGarchParams, returns: &[f64], h0: f64) -> Result<GarchPath> {
    if !(h0 > 0.0) {
        return Err(Error::Argument(format!("initial variance {h0} must be positive")));
    }
    let mut h = h0;
    let mut out = Vec::with_capacity(returns.len());
    for &r in returns {
        out.push(h);
        h = params.next_variance(r, h);
    }
    Ok(GarchPath { h: out, next: h })
}

/// `diag(Q)^{-1/2} Q diag(Q)^{-1/2}`.
pub fn correlation_from_q(q: &Matrix) -> Matrix {
    let n = q.rows();
    let inv_sd: Vec<f64> = q.diag().iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut r = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let v = if i == j {
                1.0
            } else {
                q.get(i, j) * inv_sd[i] * inv_sd[j]
            };
            r.set(i, j, v);
        }
    }
    r
}

/// `D R D` with `D = diag(sqrt(var))` and `R` built from `q`.
pub fn dcc_covariance(var: &[f64], q: &Matrix) -> Matrix {
    let r = correlation_from_q(q);
    let sd: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
    let n = var.len();
    let mut h = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            h.set(i, j, sd[i] * r.get(i, j) * sd[j]);
        }
    }
    h
}

/// Advances a DCC carry by one observation.
pub(crate) fn dcc_advance(params: &DccParams, carry: &mut DccCarry, r: &[f64], step: usize) -> Result<()> {
    let n = r.len();
    let mut z = vec![0.0; n];
    for i in 0..n {
        let v = carry.var[i];
        if !(v > 0.0) {
            return Err(Error::Numeric {
                step,
                message: format!("conditional variance of asset {i} is {v}"),
            });
        }
        z[i] = r[i] / v.sqrt();
        if !(z[i].abs() <= MAX_STANDARDIZED) {
            return Err(Error::Numeric {
                step,
                message: format!(
                    "standardized residual {} of asset {i} exceeds {MAX_STANDARDIZED:e} (r = {}, h = {v:e})",
                    z[i], r[i]
                ),
            });
        }
    }
    let w = 1.0 - params.a - params.b;
    let mut q = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            q.set(
                i,
                j,
                w * params.s.get(i, j) + params.a * (z[i] * z[j]) + params.b * carry.q.get(i, j),
            );
        }
    }
    for (i, g) in params.garch.iter().enumerate() {
        carry.var[i] = g.next_variance(r[i], carry.var[i]);
    }
    carry.q = q;
    Ok(())
}

/// Filters a DCC model, starting from `init` for row 0.
pub fn dcc_filter(params: &DccParams, returns: &[f64], init: &DccCarry) -> Result<CovPath> {
    let n = params.dim();
    if init.var.len() != n || init.q.rows() != n {
        return Err(Error::Argument("initial DCC carry has the wrong dimension".into()));
    }
    if init.var.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Argument("initial variances must be positive".into()));
    }
    cholesky(&init.q).map_err(|_| Error::Argument("initial Q is not positive definite".into()))?;
    let t_len = check_rows(returns, n)?;
    let mut carry = init.clone();
    let mut path = Vec::with_capacity(t_len);
    for (t, r) in returns.chunks_exact(n).enumerate() {
        path.push(dcc_covariance(&carry.var, &carry.q));
        dcc_advance(params, &mut carry, r, t)?;
    }
    Ok(CovPath {
        h: path,
        carry: Carry::Dcc(carry),
    })
}

/// Sample second-moment matrix of standardized residuals, `(1/T) sum z z'`.
///
/// With `rescale` the result is normalised to unit diagonal, which keeps it
/// a valid correlation target. Fails if the matrix is numerically singular.
pub fn estimate_s(standardized: &[f64], n: usize, rescale: bool) -> Result<SpdMatrix> {
    let t_len = check_rows(standardized, n)?;
    if t_len < n + 1 {
        return Err(Error::InsufficientData {
            needed: n + 1,
            got: t_len,
        });
    }
    let mut s = Matrix::zeros(n, n);
    for z in standardized.chunks_exact(n) {
        for i in 0..n {
            for j in 0..=i {
                let v = s.get(i, j) + z[i] * z[j];
                s.set(i, j, v);
            }
        }
    }
    let inv_t = 1.0 / t_len as f64;
    for i in 0..n {
        for j in 0..=i {
            let v = s.get(i, j) * inv_t;
            s.set(i, j, v);
            s.set(j, i, v);
        }
    }
    if rescale {
        s = correlation_from_q(&s);
    }
    let rank_error = || {
        Error::Argument(format!(
            "standardized residual matrix is rank deficient ({t_len} rows, {n} assets); \
             reduce the number of assets or extend the sample"
        ))
    };
    let l = cholesky(&s).map_err(|_| rank_error())?;
    let max_diag = s.diag().iter().fold(0.0f64, |m, d| m.max(*d));
    let min_pivot = l.diag().iter().fold(f64::INFINITY, |m, d| m.min(d * d));
    if min_pivot <= 1e-12 * max_diag {
        return Err(rank_error());
    }
    SpdMatrix::new(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bekk(c: &[f64], a: f64, b: f64) -> ScalarBekkParams {
        ScalarBekkParams::new(LowerTriangular::from_packed(c.to_vec()).unwrap(), a, b).unwrap()
    }

    #[test]
    fn bekk_constant_when_no_dynamics() {
        let p = bekk(&[1.0, 0.3, 0.8], 0.0, 0.0);
        let r = [1.0, -2.0, 0.5, 0.1, 3.0, -1.0];
        let path = bekk_filter(&p, &r, &SpdMatrix::new(p.omega()).unwrap()).unwrap();
        for h in &path.h {
            assert_eq!(*h, p.omega());
        }
        assert_eq!(path.carry, Carry::Bekk { h: p.omega() });
    }

    #[test]
    fn bekk_scalar_hand_step() {
        let p = bekk(&[1.0], 0.1, 0.8);
        let path = bekk_filter(&p, &[2.0], &SpdMatrix::identity(1)).unwrap();
        let Carry::Bekk { h } = path.carry else { unreachable!() };
        assert!((h.get(0, 0) - 2.2).abs() < 1e-15);
    }

    #[test]
    fn bekk_matrix_hand_step() {
        let p = bekk(&[1.0, 0.0, 1.0], 0.5, 0.4);
        let path = bekk_filter(&p, &[1.0, 0.0], &SpdMatrix::identity(2)).unwrap();
        let h = path.carry.covariance();
        assert!((h.get(0, 0) - 1.9).abs() < 1e-15);
        assert!((h.get(1, 1) - 1.4).abs() < 1e-15);
        assert_eq!(h.get(0, 1), 0.0);
    }

    #[test]
    fn bekk_rejects_bad_params() {
        let c = LowerTriangular::identity(2);
        assert!(ScalarBekkParams::new(c.clone(), 0.5, 0.5).is_err());
        assert!(ScalarBekkParams::new(c.clone(), -0.1, 0.5).is_err());
        assert!(ScalarBekkParams::new(LowerTriangular::zeros(2), 0.1, 0.5).is_err());
    }

    #[test]
    fn bekk_stationary_limit() {
        let p = bekk(&[1.0, 0.2, 0.7], 0.05, 0.9);
        let zeros = vec![0.0; 2 * 1000];
        let path = bekk_filter(&p, &zeros, &SpdMatrix::identity(2)).unwrap();
        let limit = p.omega().scale(1.0 / (1.0 - p.b));
        let h = path.carry.covariance();
        for i in 0..2 {
            for j in 0..2 {
                assert!((h.get(i, j) - limit.get(i, j)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn garch_examples() {
        let p = UnivariateGarchParams::new(0.3, 0.0, 0.0).unwrap();
        let out = garch_filter(&p, &[1.0, 2.0, -3.0], 5.0).unwrap();
        assert_eq!(out.h[1..], [0.3, 0.3]);
        assert_eq!(out.next, 0.3);

        let p = UnivariateGarchParams::new(0.1, 0.1, 0.8).unwrap();
        let out = garch_filter(&p, &[1.0], 1.0).unwrap();
        assert!((out.next - 1.0).abs() < 1e-15);

        // closed form: h_t = (1 - 0.9^t) + 0.9^t * 2
        let p = UnivariateGarchParams::new(0.1, 0.0, 0.9).unwrap();
        let out = garch_filter(&p, &vec![0.7; 200], 2.0).unwrap();
        for (t, h) in out.h.iter().enumerate() {
            let expect = 0.1 * (1.0 - 0.9f64.powi(t as i32)) / 0.1 + 0.9f64.powi(t as i32) * 2.0;
            assert!((h - expect).abs() < 1e-12, "t={t}");
        }
        assert!((out.next - 1.0).abs() < 1e-8);
        assert!(garch_filter(&p, &[1.0], 0.0).is_err());
    }

    #[test]
    fn correlation_normalisation() {
        let q = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.5, 4.0]]).unwrap();
        let r = correlation_from_q(&q);
        assert_eq!(r.as_slice(), &[1.0, 0.25, 0.25, 1.0]);
    }

    #[test]
    fn dcc_identity_correlation_gives_diagonal() {
        let g = UnivariateGarchParams::new(0.1, 0.1, 0.8).unwrap();
        let p = DccParams::new(vec![g, g], 0.0, 0.0, Matrix::identity(2)).unwrap();
        let r = [1.0, -0.5, 0.2, 2.0, -1.5, 0.3];
        let path = dcc_filter(&p, &r, &p.unconditional_carry()).unwrap();
        let h0 = garch_filter(&g, &[1.0, 0.2, -1.5], 1.0).unwrap();
        let h1 = garch_filter(&g, &[-0.5, 2.0, 0.3], 1.0).unwrap();
        for (t, h) in path.h.iter().enumerate() {
            assert_eq!(h.get(0, 1), 0.0);
            assert!((h.get(0, 0) - h0.h[t]).abs() < 1e-14);
            assert!((h.get(1, 1) - h1.h[t]).abs() < 1e-14);
        }
    }

    #[test]
    fn dcc_zero_shock_fixed_point() {
        let g = UnivariateGarchParams::new(0.1, 0.1, 0.8).unwrap();
        let p = DccParams::new(vec![g, g], 0.05, 0.9, Matrix::identity(2)).unwrap();
        let mut carry = p.unconditional_carry();
        dcc_advance(&p, &mut carry, &[0.0, 0.0], 0).unwrap();
        let r = correlation_from_q(&carry.q);
        for i in 0..2 {
            for j in 0..2 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((carry.q.get(i, j) - 0.95 * e).abs() < 1e-15);
                assert!((r.get(i, j) - e).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dcc_guard_trips_on_exploding_residual() {
        let g = UnivariateGarchParams::new(0.1, 0.1, 0.8).unwrap();
        let p = DccParams::new(vec![g], 0.05, 0.9, Matrix::identity(1)).unwrap();
        let init = DccCarry {
            var: vec![1e-14],
            q: Matrix::identity(1),
        };
        assert!(matches!(
            dcc_filter(&p, &[1.0], &init),
            Err(Error::Numeric { step: 0, .. })
        ));
    }

    #[test]
    fn estimate_s_examples() {
        let mut z = Vec::new();
        for _ in 0..10 {
            z.extend_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        }
        let raw = estimate_s(&z, 2, false).unwrap();
        assert_eq!(raw.values().as_slice(), &[0.5, 0.0, 0.0, 0.5]);
        let scaled = estimate_s(&z, 2, true).unwrap();
        assert_eq!(scaled.values().as_slice(), &[1.0, 0.0, 0.0, 1.0]);

        let repeated: Vec<f64> = (0..20).flat_map(|_| [1.0, 2.0]).collect();
        assert!(estimate_s(&repeated, 2, true).is_err());
        assert!(estimate_s(&[1.0, 2.0], 2, true).is_err());
    }
}
