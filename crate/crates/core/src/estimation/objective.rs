//! Training objectives with exact reverse-mode gradients.
//!
//! Every objective works on a contiguous block of rows holding the training
//! span followed by the validation span. The training loss is the mean NLL
//! over the training rows; validation continues the same recursion into the
//! following rows, so its starting state is the training carry.

use rand::RngCore;

use crate::error::{Error, Result};
use crate::garch::{
    bekk_filter, bekk_step, dcc_advance, dcc_covariance, dcc_filter, DccCarry, DccParams,
    UnivariateGarchParams,
};
use crate::linalg::{LowerTriangular, Matrix, SpdMatrix};
use crate::lstm::{build_ct, lstm_step_cached, swish_grad, Dropout, LstmState, LstmWeights};
use crate::lstm_bekk::lstm_bekk_filter;

use super::nll::{factor_with_jitter, gaussian_nll, step_loss_grad, NllValue};
use crate::linalg::factor_logdet_quadform;
use super::transform::{
    bekk_from_free, chol_backprop, garch_from_free, lstm_bekk_from_free, persistence_backprop,
    persistence_from_free,
};
use crate::lstm::sigmoid;

/// Rows `[0, train_rows)` are training, the rest validation.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Span<'a> {
    pub rows: &'a [f64],
    pub n: usize,
    pub train_rows: usize,
}

impl<'a> Span<'a> {
    pub fn train(&self) -> &'a [f64] {
        &self.rows[..self.train_rows * self.n]
    }

    fn validation_nll(&self, path: &[Matrix]) -> Result<NllValue> {
        let start = self.train_rows;
        gaussian_nll(&path[start..], &self.rows[start * self.n..])
    }
}

pub(crate) trait Objective {
    fn num_params(&self) -> usize;

    /// Coordinates the optimiser must leave untouched.
    fn frozen(&self) -> Option<&[bool]> {
        None
    }

    /// Training NLL and its gradient; `rng` drives dropout where present.
    fn value_grad(&self, theta: &[f64], rng: &mut dyn RngCore) -> Result<(NllValue, Vec<f64>)>;

    /// Evaluation-mode per-step terms `0.5 (ln|H_t| + r_t' H_t^{-1} r_t)` over
    /// the training rows: the loss without its constant, left unsummed.
    fn terms(&self, theta: &[f64]) -> Result<Vec<f64>>;

    fn validation(&self, theta: &[f64]) -> Result<NllValue>;
}

#[inline]
fn quad(g: &Matrix, r: &[f64]) -> f64 {
    let n = r.len();
    let gs = g.as_slice();
    let mut acc = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += gs[i * n + j] * r[j];
        }
        acc += r[i] * row;
    }
    acc
}

/// Packed gradient with respect to `L` of a loss whose gradient with respect
/// to `L L'` is `d`: `(d + d') L`, lower part.
fn outer_backprop(d: &Matrix, l: &LowerTriangular) -> Vec<f64> {
    let n = l.dim();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in 0..=i {
            let mut acc = 0.0;
            for k in j..n {
                acc += (d.get(i, k) + d.get(k, i)) * l.get(k, j);
            }
            out.push(acc);
        }
    }
    out
}

/// NLL terms and per-step `dL/dH_t` for a path, scaled by `1/T`.
fn loss_and_grads(path: &[Matrix], returns: &[f64], n: usize) -> Result<(NllValue, Vec<Matrix>)> {
    let t_len = path.len();
    let scale = 1.0 / t_len as f64;
    let mut sum = 0.0;
    let mut max_jitter = 0.0f64;
    let mut grads = Vec::with_capacity(t_len);
    for (t, (h, r)) in path.iter().zip(returns.chunks_exact(n)).enumerate() {
        let (l, g, j) = step_loss_grad(h, r, t, scale)?;
        sum += l;
        max_jitter = max_jitter.max(j);
        grads.push(g);
    }
    Ok((NllValue::from_terms(sum, t_len, max_jitter), grads))
}

fn variable_terms(path: &[Matrix], returns: &[f64]) -> Result<Vec<f64>> {
    let n = path.first().map(Matrix::rows).unwrap_or(1);
    path.iter()
        .zip(returns.chunks_exact(n))
        .enumerate()
        .map(|(t, (h, r))| {
            let f = factor_with_jitter(h, t)?;
            let (logdet, quad) = factor_logdet_quadform(&f.chol, r);
            Ok(0.5 * (logdet + quad))
        })
        .collect()
}

/// Reverse pass through `H_t = Omega + D_t + a r_{t-1} r_{t-1}' + b H_{t-1}`
/// for `t >= 1` (`H_0` is fixed). `on_step(t, gbar)` receives the total
/// gradient with respect to `H_t`, which is also the gradient of `D_t`.
/// Returns `(dOmega, da, db)`.
fn bekk_backward(
    path: &[Matrix],
    returns: &[f64],
    grads: &[Matrix],
    b: f64,
    mut on_step: impl FnMut(usize, &Matrix) -> Result<()>,
) -> Result<(Matrix, f64, f64)> {
    let n = path[0].rows();
    let mut gbar = Matrix::zeros(n, n);
    let mut d_omega = Matrix::zeros(n, n);
    let mut da = 0.0;
    let mut db = 0.0;
    for t in (1..path.len()).rev() {
        for (x, g) in gbar.as_mut_slice().iter_mut().zip(grads[t].as_slice()) {
            *x = g + b * *x;
        }
        d_omega.add_scaled(1.0, &gbar);
        da += quad(&gbar, &returns[(t - 1) * n..t * n]);
        db += gbar.dot(&path[t - 1]);
        on_step(t, &gbar)?;
    }
    Ok((d_omega, da, db))
}

/// Free-coordinate gradient of the static block `[C, p, q]`.
fn static_block_grad(theta: &[f64], c: &LowerTriangular, d_omega: &Matrix, da: f64, db: f64) -> Vec<f64> {
    let m = c.packed().len();
    let mut g = outer_backprop(d_omega, c);
    chol_backprop(&theta[..m], &mut g);
    let (dp, dq) = persistence_backprop(theta[m], theta[m + 1], da, db);
    g.extend([dp, dq]);
    g
}

pub(crate) struct BekkObjective<'a> {
    pub span: Span<'a>,
    pub h0: SpdMatrix,
}

impl Objective for BekkObjective<'_> {
    fn num_params(&self) -> usize {
        self.span.n * (self.span.n + 1) / 2 + 2
    }

    fn value_grad(&self, theta: &[f64], _rng: &mut dyn RngCore) -> Result<(NllValue, Vec<f64>)> {
        let n = self.span.n;
        let p = bekk_from_free(theta, n)?;
        let train = self.span.train();
        let path = bekk_filter(&p, train, &self.h0)?.h;
        let (value, grads) = loss_and_grads(&path, train, n)?;
        let (d_omega, da, db) = bekk_backward(&path, train, &grads, p.b, |_, _| Ok(()))?;
        Ok((value, static_block_grad(theta, &p.c, &d_omega, da, db)))
    }

    fn terms(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let p = bekk_from_free(theta, self.span.n)?;
        let train = self.span.train();
        variable_terms(&bekk_filter(&p, train, &self.h0)?.h, train)
    }

    fn validation(&self, theta: &[f64]) -> Result<NllValue> {
        let p = bekk_from_free(theta, self.span.n)?;
        self.span.validation_nll(&bekk_filter(&p, self.span.rows, &self.h0)?.h)
    }
}

/// Univariate GARCH(1,1) on one return column.
pub(crate) struct GarchObjective {
    pub rows: Vec<f64>,
    pub train_rows: usize,
    pub h0: f64,
}

impl GarchObjective {
    fn nll(&self, g: &UnivariateGarchParams, r: &[f64]) -> Result<(NllValue, Vec<f64>)> {
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let mut h = self.h0;
        let mut sum = 0.0;
        let mut path = Vec::with_capacity(r.len());
        for (t, &x) in r.iter().enumerate() {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::Numeric {
                    step: t,
                    message: format!("conditional variance {h}"),
                });
            }
            sum += 0.5 * (ln2pi + h.ln() + x * x / h);
            path.push(h);
            h = g.next_variance(x, h);
        }
        Ok((NllValue::from_terms(sum, r.len(), 0.0), path))
    }
}

impl Objective for GarchObjective {
    fn num_params(&self) -> usize {
        3
    }

    fn value_grad(&self, theta: &[f64], _rng: &mut dyn RngCore) -> Result<(NllValue, Vec<f64>)> {
        let g = garch_from_free(theta)?;
        let r = &self.rows[..self.train_rows];
        let (value, h) = self.nll(&g, r)?;
        let scale = 1.0 / r.len() as f64;
        let (mut d_omega, mut d_alpha, mut d_beta) = (0.0, 0.0, 0.0);
        let mut gbar = 0.0;
        for t in (1..r.len()).rev() {
            let gt = 0.5 * scale * (1.0 / h[t] - r[t] * r[t] / (h[t] * h[t]));
            gbar = gt + g.beta * gbar;
            d_omega += gbar;
            d_alpha += gbar * r[t - 1] * r[t - 1];
            d_beta += gbar * h[t - 1];
        }
        let (dp, dq) = persistence_backprop(theta[1], theta[2], d_alpha, d_beta);
        Ok((value, vec![d_omega * sigmoid(theta[0]), dp, dq]))
    }

    fn terms(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let g = garch_from_free(theta)?;
        let r = &self.rows[..self.train_rows];
        let (_, h) = self.nll(&g, r)?;
        Ok(r.iter().zip(&h).map(|(x, h)| 0.5 * (h.ln() + x * x / h)).collect())
    }

    fn validation(&self, theta: &[f64]) -> Result<NllValue> {
        let g = garch_from_free(theta)?;
        let (_, h) = self.nll(&g, &self.rows)?;
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let tail = &self.rows[self.train_rows..];
        let sum: f64 = tail
            .iter()
            .zip(&h[self.train_rows..])
            .map(|(x, h)| 0.5 * (ln2pi + h.ln() + x * x / h))
            .sum();
        Ok(NllValue::from_terms(sum, tail.len(), 0.0))
    }
}

/// Second DCC stage: `(a, b)` with the univariate GARCH parameters and the
/// correlation target held fixed. Free layout `[p, q]`.
pub(crate) struct DccObjective<'a> {
    pub span: Span<'a>,
    pub garch: Vec<UnivariateGarchParams>,
    pub s: Matrix,
    pub init: DccCarry,
}

impl DccObjective<'_> {
    pub fn params(&self, theta: &[f64]) -> Result<DccParams> {
        if theta.len() != 2 {
            return Err(Error::Argument("DCC stage two has two free parameters".into()));
        }
        let (a, b) = persistence_from_free(theta[0], theta[1]);
        Ok(DccParams {
            garch: self.garch.clone(),
            a,
            b,
            s: self.s.clone(),
        })
    }
}

/// Gradient with respect to `Q` of a loss with gradient `g` with respect to
/// `H = D R D`, `R = N Q N`, `N = diag(Q)^{-1/2}`.
fn dcc_q_grad(g: &Matrix, var: &[f64], q: &Matrix) -> Matrix {
    let n = var.len();
    let sd: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
    let inv: Vec<f64> = q.diag().iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut dq = Matrix::zeros(n, n);
    let mut d_inv = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let dr = g.get(i, j) * sd[i] * sd[j];
            dq.set(i, j, dr * inv[i] * inv[j]);
            let qij = q.get(i, j);
            d_inv[i] += dr * qij * inv[j];
            d_inv[j] += dr * qij * inv[i];
        }
    }
    for i in 0..n {
        dq.set(i, i, -0.5 * d_inv[i] * inv[i].powi(3));
    }
    dq
}

impl Objective for DccObjective<'_> {
    fn num_params(&self) -> usize {
        2
    }

    fn value_grad(&self, theta: &[f64], _rng: &mut dyn RngCore) -> Result<(NllValue, Vec<f64>)> {
        let n = self.span.n;
        let p = self.params(theta)?;
        let train = self.span.train();
        let t_len = train.len() / n;
        let mut carry = self.init.clone();
        let mut qs = Vec::with_capacity(t_len);
        let mut vars = Vec::with_capacity(t_len);
        let mut path = Vec::with_capacity(t_len);
        for (t, r) in train.chunks_exact(n).enumerate() {
            path.push(dcc_covariance(&carry.var, &carry.q));
            qs.push(carry.q.clone());
            vars.push(carry.var.clone());
            dcc_advance(&p, &mut carry, r, t)?;
        }
        let (value, grads) = loss_and_grads(&path, train, n)?;
        let mut gq = Matrix::zeros(n, n);
        let (mut da, mut db) = (0.0, 0.0);
        for t in (1..t_len).rev() {
            let dq = dcc_q_grad(&grads[t], &vars[t], &qs[t]);
            for (x, d) in gq.as_mut_slice().iter_mut().zip(dq.as_slice()) {
                *x = d + p.b * *x;
            }
            let r = &train[(t - 1) * n..t * n];
            let z: Vec<f64> = r.iter().zip(&vars[t - 1]).map(|(x, v)| x / v.sqrt()).collect();
            for i in 0..n {
                for j in 0..n {
                    let g = gq.get(i, j);
                    let s = p.s.get(i, j);
                    da += g * (z[i] * z[j] - s);
                    db += g * (qs[t - 1].get(i, j) - s);
                }
            }
        }
        let (dp, dqf) = persistence_backprop(theta[0], theta[1], da, db);
        Ok((value, vec![dp, dqf]))
    }

    fn terms(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let p = self.params(theta)?;
        let train = self.span.train();
        variable_terms(&dcc_filter(&p, train, &self.init)?.h, train)
    }

    fn validation(&self, theta: &[f64]) -> Result<NllValue> {
        let p = self.params(theta)?;
        self.span.validation_nll(&dcc_filter(&p, self.span.rows, &self.init)?.h)
    }
}

/// LSTM-BEKK with backpropagation through time. Free layout
/// `[C, p, q, lstm...]`; with `freeze_lstm` the LSTM block is frozen.
pub(crate) struct LstmBekkObjective<'a> {
    pub span: Span<'a>,
    pub h0: SpdMatrix,
    pub template: LstmWeights,
    pub dropout: f64,
    pub frozen: Option<Vec<bool>>,
}

impl Objective for LstmBekkObjective<'_> {
    fn num_params(&self) -> usize {
        self.span.n * (self.span.n + 1) / 2 + 2 + self.template.num_params()
    }

    fn frozen(&self) -> Option<&[bool]> {
        self.frozen.as_deref()
    }

    fn value_grad(&self, theta: &[f64], rng: &mut dyn RngCore) -> Result<(NllValue, Vec<f64>)> {
        let n = self.span.n;
        let p = lstm_bekk_from_free(theta, &self.template)?;
        let beta = p.lstm.beta;
        let train = self.span.train();
        let t_len = train.len() / n;
        let omega = p.omega();

        let mut path = Vec::with_capacity(t_len);
        let mut caches = Vec::with_capacity(t_len);
        let mut ctildes = Vec::with_capacity(t_len);
        let mut cts = Vec::with_capacity(t_len);
        let mut state = LstmState::for_weights(&p.lstm);
        path.push(self.h0.values().clone());
        for t in 0..t_len.saturating_sub(1) {
            let r = &train[t * n..(t + 1) * n];
            let (next, ctilde, cache) = lstm_step_cached(
                &p.lstm,
                &state,
                r,
                Dropout::Train {
                    p: self.dropout,
                    rng: &mut *rng,
                },
            )
            .map_err(|e| e.at_step(t))?;
            let ct = build_ct(&ctilde, beta)?;
            let h = bekk_step(&omega, Some(&ct.outer()), p.a, p.b, r, &path[t]);
            path.push(h);
            state = next;
            caches.push(cache);
            ctildes.push(ctilde);
            cts.push(ct);
        }

        let (value, grads) = loss_and_grads(&path, train, n)?;
        let mut lstm_grad = p.lstm.zeros_like();
        let mut d_h = vec![vec![0.0; n]; p.lstm.num_layers()];
        let mut d_c = d_h.clone();
        let mut d_beta = 0.0;
        let (d_omega, da, db) = bekk_backward(&path, train, &grads, p.b, |t, gbar| {
            let s = t - 1;
            let mut d_ct = outer_backprop(gbar, &cts[s]);
            for i in 0..n {
                let k = i * (i + 1) / 2 + i;
                let (gd, gb) = swish_grad(ctildes[s][k], beta);
                d_beta += d_ct[k] * gb;
                d_ct[k] *= gd;
            }
            crate::lstm::backward_step(&p.lstm, &caches[s], &d_ct, &mut d_h, &mut d_c, &mut lstm_grad);
            Ok(())
        })?;
        lstm_grad.beta = d_beta;
        let mut g = static_block_grad(theta, &p.c, &d_omega, da, db);
        g.extend(lstm_grad.flatten());
        Ok((value, g))
    }

    fn terms(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let p = lstm_bekk_from_free(theta, &self.template)?;
        let train = self.span.train();
        variable_terms(&lstm_bekk_filter(&p, train, &self.h0)?.h, train)
    }

    fn validation(&self, theta: &[f64]) -> Result<NllValue> {
        let p = lstm_bekk_from_free(theta, &self.template)?;
        self.span.validation_nll(&lstm_bekk_filter(&p, self.span.rows, &self.h0)?.h)
    }
}

