//! Stacked LSTM producing the dynamic lower-triangular factor `C_t`.
//!
//! Every layer has hidden size `n`, the number of assets, and sees
//! `[h_{t-1}, x_t]` where `x_t` is the previous layer's output (or the
//! return vector for the first layer). The top hidden state goes through an
//! affine projection to `n(n+1)/2` values, which [`build_ct`] reshapes into
//! a lower-triangular matrix with a Swish-regularised diagonal.
//!
//! The forward pass can record a [`StepCache`]; [`backward_step`] consumes
//! it to backpropagate through one time step, so a caller walking the
//! caches in reverse gets exact gradients through time.

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::linalg::{tri_dim, tri_len, LowerTriangular, Matrix};

pub const MIN_LAYERS: usize = 3;
pub const MAX_LAYERS: usize = 5;

/// Gate order used for weight storage: input, forget, output, candidate.
const INPUT: usize = 0;
const FORGET: usize = 1;
const OUTPUT: usize = 2;
const CANDIDATE: usize = 3;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `d * sigmoid(beta * d)`.
#[inline]
pub fn swish(d: f64, beta: f64) -> f64 {
    d * sigmoid(beta * d)
}

/// Partial derivatives of [`swish`] with respect to `d` and `beta`.
#[inline]
pub fn swish_grad(d: f64, beta: f64) -> (f64, f64) {
    let s = sigmoid(beta * d);
    let ds = s * (1.0 - s);
    (s + beta * d * ds, d * d * ds)
}

/// Gate weights and biases of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    /// `n x 2n` matrices acting on `[h_{t-1}, x_t]`.
    pub w: [Matrix; 4],
    pub b: [Vec<f64>; 4],
}

impl LstmLayer {
    fn zeros(n: usize) -> Self {
        Self {
            w: std::array::from_fn(|_| Matrix::zeros(n, 2 * n)),
            b: std::array::from_fn(|_| vec![0.0; n]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmWeights {
    n: usize,
    pub layers: Vec<LstmLayer>,
    /// `n(n+1)/2 x n` output projection.
    pub proj_w: Matrix,
    pub proj_b: Vec<f64>,
    /// Swish shape parameter.
    pub beta: f64,
}

impl LstmWeights {
    /// All weights and biases zero, `beta = 1`.
    pub fn zeros(n: usize, layers: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Argument("LSTM needs at least one asset".into()));
        }
        if !(MIN_LAYERS..=MAX_LAYERS).contains(&layers) {
            return Err(Error::Argument(format!(
                "layer count {layers} outside {MIN_LAYERS}..={MAX_LAYERS}"
            )));
        }
        Ok(Self {
            n,
            layers: (0..layers).map(|_| LstmLayer::zeros(n)).collect(),
            proj_w: Matrix::zeros(tri_len(n), n),
            proj_b: vec![0.0; tri_len(n)],
            beta: 1.0,
        })
    }

    /// Xavier-uniform gate and projection weights, forget bias 1, other biases 0.
    pub fn xavier<R: Rng + ?Sized>(n: usize, layers: usize, rng: &mut R) -> Result<Self> {
        let mut w = Self::zeros(n, layers)?;
        let gate_lim = (6.0 / (3 * n) as f64).sqrt();
        for layer in &mut w.layers {
            for g in 0..4 {
                for x in layer.w[g].as_mut_slice() {
                    *x = rng.random_range(-gate_lim..gate_lim);
                }
            }
            layer.b[FORGET].iter_mut().for_each(|b| *b = 1.0);
        }
        let m = tri_len(n);
        let proj_lim = (6.0 / (n + m) as f64).sqrt();
        for x in w.proj_w.as_mut_slice() {
            *x = rng.random_range(-proj_lim..proj_lim);
        }
        Ok(w)
    }

    /// Same shape, every entry (including `beta`) zero. Used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(self.n, self.layers.len()).expect("shape already validated");
        z.beta = 0.0;
        z
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    #[inline]
    pub fn output_len(&self) -> usize {
        tri_len(self.n)
    }

    pub fn num_params(&self) -> usize {
        let n = self.n;
        self.layers.len() * 4 * (2 * n * n + n) + tri_len(n) * (n + 1) + 1
    }

    /// Parameters in a fixed order: per layer the four gate matrices then the
    /// four biases, then projection matrix, projection bias, `beta`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            for g in 0..4 {
                out.extend_from_slice(layer.w[g].as_slice());
            }
            for g in 0..4 {
                out.extend_from_slice(&layer.b[g]);
            }
        }
        out.extend_from_slice(self.proj_w.as_slice());
        out.extend_from_slice(&self.proj_b);
        out.push(self.beta);
        out
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn assign_flat(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.num_params() {
            return Err(Error::Argument(format!(
                "expected {} LSTM parameters, got {}",
                self.num_params(),
                src.len()
            )));
        }
        let mut pos = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&src[pos..pos + dst.len()]);
            pos += dst.len();
        };
        for layer in &mut self.layers {
            for g in 0..4 {
                take(layer.w[g].as_mut_slice());
            }
            for g in 0..4 {
                take(&mut layer.b[g]);
            }
        }
        take(self.proj_w.as_mut_slice());
        take(&mut self.proj_b);
        self.beta = src[src.len() - 1];
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|x| x.is_finite())
    }

    /// True when the projection is identically zero, so `C_t = 0` for every input.
    pub fn output_is_zero(&self) -> bool {
        self.proj_w.as_slice().iter().all(|x| *x == 0.0) && self.proj_b.iter().all(|x| *x == 0.0)
    }
}

/// Hidden and cell vectors of every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

impl LstmState {
    pub fn zeros(n: usize, layers: usize) -> Self {
        Self {
            h: vec![vec![0.0; n]; layers],
            c: vec![vec![0.0; n]; layers],
        }
    }

    pub fn for_weights(w: &LstmWeights) -> Self {
        Self::zeros(w.dim(), w.num_layers())
    }
}

/// Whether inter-layer dropout is active.
pub enum Dropout<'a> {
    Eval,
    /// Inverted dropout with drop probability `p` on the vectors passed
    /// between stacked layers.
    Train { p: f64, rng: &'a mut dyn RngCore },
}

impl Dropout<'_> {
    fn mask(&mut self, n: usize) -> Option<Vec<f64>> {
        match self {
            Dropout::Train { p, rng } if *p > 0.0 => {
                let keep = 1.0 - *p;
                let scale = 1.0 / keep;
                Some(
                    (0..n)
                        .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
                        .collect(),
                )
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Vec<f64>,
    mask: Option<Vec<f64>>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    gates: [Vec<f64>; 4],
    tanh_c: Vec<f64>,
}

/// Activations of one forward step, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct StepCache {
    layers: Vec<LayerCache>,
    h_top: Vec<f64>,
}

/// One time step: consumes `x` (length `n`) and returns the new state and
/// the projected vector of length `n(n+1)/2`.
pub fn lstm_step(
    w: &LstmWeights,
    state: &LstmState,
    x: &[f64],
    dropout: Dropout<'_>,
) -> Result<(LstmState, Vec<f64>)> {
    forward(w, state, x, dropout, false).map(|(s, out, _)| (s, out))
}

/// Like [`lstm_step`] but also returns the activations for [`backward_step`].
pub fn lstm_step_cached(
    w: &LstmWeights,
    state: &LstmState,
    x: &[f64],
    dropout: Dropout<'_>,
) -> Result<(LstmState, Vec<f64>, StepCache)> {
    forward(w, state, x, dropout, true).map(|(s, out, c)| (s, out, c.expect("cache requested")))
}

fn forward(
    w: &LstmWeights,
    state: &LstmState,
    x: &[f64],
    mut dropout: Dropout<'_>,
    keep_cache: bool,
) -> Result<(LstmState, Vec<f64>, Option<StepCache>)> {
    let n = w.n;
    if x.len() != n {
        return Err(Error::Argument(format!("LSTM input has length {}, expected {n}", x.len())));
    }
    if state.h.len() != w.layers.len() {
        return Err(Error::Argument("LSTM state has the wrong number of layers".into()));
    }
    let mut next = LstmState {
        h: Vec::with_capacity(w.layers.len()),
        c: Vec::with_capacity(w.layers.len()),
    };
    let mut caches = Vec::new();
    let mut input: Vec<f64> = x.to_vec();
    let mut mask = None;
    for (l, layer) in w.layers.iter().enumerate() {
        if l > 0 {
            mask = dropout.mask(n);
            if let Some(m) = &mask {
                input.iter_mut().zip(m).for_each(|(v, s)| *v *= s);
            }
        }
        let h_prev = &state.h[l];
        let c_prev = &state.c[l];
        let mut gates: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; n]);
        for (g, out) in gates.iter_mut().enumerate() {
            let wg = &layer.w[g];
            for k in 0..n {
                let row = wg.row(k);
                let mut acc = layer.b[g][k];
                for j in 0..n {
                    acc += row[j] * h_prev[j];
                }
                for j in 0..n {
                    acc += row[n + j] * input[j];
                }
                out[k] = if g == CANDIDATE { acc.tanh() } else { sigmoid(acc) };
            }
        }
        let mut c = vec![0.0; n];
        let mut h = vec![0.0; n];
        let mut tanh_c = vec![0.0; n];
        for k in 0..n {
            c[k] = gates[FORGET][k] * c_prev[k] + gates[INPUT][k] * gates[CANDIDATE][k];
            tanh_c[k] = c[k].tanh();
            h[k] = gates[OUTPUT][k] * tanh_c[k];
        }
        if c.iter().chain(&h).any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                step: 0,
                message: format!("non-finite LSTM activation in layer {l}"),
            });
        }
        if keep_cache {
            caches.push(LayerCache {
                input: input.clone(),
                mask: mask.take(),
                h_prev: h_prev.clone(),
                c_prev: c_prev.clone(),
                gates,
                tanh_c,
            });
        }
        input = h.clone();
        next.h.push(h);
        next.c.push(c);
    }
    let h_top = input;
    let mut out = w.proj_w.matvec(&h_top);
    out.iter_mut().zip(&w.proj_b).for_each(|(o, b)| *o += b);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            step: 0,
            message: "non-finite LSTM projection output".into(),
        });
    }
    let cache = keep_cache.then(|| StepCache {
        layers: caches,
        h_top,
    });
    Ok((next, out, cache))
}

/// Backpropagates one step.
///
/// `d_out` is the loss gradient with respect to the projected output of this
/// step. `d_h`/`d_c` hold the gradients with respect to this step's output
/// state (from later steps) and are overwritten with the gradients with
/// respect to the previous state. Parameter gradients are added to `grads`.
pub fn backward_step(
    w: &LstmWeights,
    cache: &StepCache,
    d_out: &[f64],
    d_h: &mut [Vec<f64>],
    d_c: &mut [Vec<f64>],
    grads: &mut LstmWeights,
) {
    let n = w.n;
    let m = w.output_len();
    // projection
    for i in 0..m {
        let g = d_out[i];
        if g == 0.0 {
            continue;
        }
        let row = &mut grads.proj_w.as_mut_slice()[i * n..(i + 1) * n];
        for (r, h) in row.iter_mut().zip(&cache.h_top) {
            *r += g * h;
        }
        grads.proj_b[i] += g;
    }
    let mut dh_from_above = w.proj_w.matvec_t(d_out);
    for l in (0..w.layers.len()).rev() {
        let lc = &cache.layers[l];
        let layer = &w.layers[l];
        let gl = &mut grads.layers[l];
        let dh: Vec<f64> = d_h[l].iter().zip(&dh_from_above).map(|(a, b)| a + b).collect();
        let mut d_pre: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; n]);
        let mut dc_prev = vec![0.0; n];
        for k in 0..n {
            let gi = lc.gates[INPUT][k];
            let gf = lc.gates[FORGET][k];
            let go = lc.gates[OUTPUT][k];
            let gc = lc.gates[CANDIDATE][k];
            let tc = lc.tanh_c[k];
            let d_go = dh[k] * tc;
            let dc = d_c[l][k] + dh[k] * go * (1.0 - tc * tc);
            let d_gf = dc * lc.c_prev[k];
            let d_gi = dc * gc;
            let d_gc = dc * gi;
            dc_prev[k] = dc * gf;
            d_pre[INPUT][k] = d_gi * gi * (1.0 - gi);
            d_pre[FORGET][k] = d_gf * gf * (1.0 - gf);
            d_pre[OUTPUT][k] = d_go * go * (1.0 - go);
            d_pre[CANDIDATE][k] = d_gc * (1.0 - gc * gc);
        }
        let mut dh_prev = vec![0.0; n];
        let mut d_input = vec![0.0; n];
        for g in 0..4 {
            let wg = &layer.w[g];
            let gw = gl.w[g].as_mut_slice();
            for k in 0..n {
                let dp = d_pre[g][k];
                if dp == 0.0 {
                    continue;
                }
                gl.b[g][k] += dp;
                let row = wg.row(k);
                let grow = &mut gw[k * 2 * n..(k + 1) * 2 * n];
                for j in 0..n {
                    grow[j] += dp * lc.h_prev[j];
                    grow[n + j] += dp * lc.input[j];
                    dh_prev[j] += dp * row[j];
                    d_input[j] += dp * row[n + j];
                }
            }
        }
        if let Some(mask) = &lc.mask {
            d_input.iter_mut().zip(mask).for_each(|(d, s)| *d *= s);
        }
        d_h[l] = dh_prev;
        d_c[l] = dc_prev;
        dh_from_above = d_input;
    }
}

/// Reshapes `ctilde` row-major into a lower triangle and applies Swish to the diagonal.
pub fn build_ct(ctilde: &[f64], beta: f64) -> Result<LowerTriangular> {
    let n = tri_dim(ctilde.len()).ok_or_else(|| {
        Error::Argument(format!("length {} is not a triangular number", ctilde.len()))
    })?;
    let mut l = LowerTriangular::from_packed(ctilde.to_vec())?;
    for i in 0..n {
        let d = l.get(i, i);
        l.set(i, i, swish(d, beta));
    }
    Ok(l)
}
