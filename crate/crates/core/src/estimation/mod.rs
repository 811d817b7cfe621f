//! Maximum-likelihood training shared by the three models.
//!
//! Parameters live in an unconstrained space (see [`transform`]) so every
//! optimiser iterate is feasible. Gradients are exact reverse-mode
//! derivatives of the full-window mean NLL. DCC is fitted in two stages:
//! each univariate GARCH on its own, then `(a, b)` on the full Gaussian NLL
//! with the variances and the correlation target frozen.

mod nll;
mod objective;
mod optim;
pub mod transform;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{sample_second_moment, ReturnsPanel};
use crate::error::{Error, Result};
use crate::garch::{
    check_rows, estimate_s, garch_filter, Carry, DccCarry, ScalarBekkParams,
    UnivariateGarchParams,
};
use crate::linalg::{cholesky, tri_len, LowerTriangular, Matrix, SpdMatrix};
use crate::lstm::{LstmWeights, MAX_LAYERS, MIN_LAYERS};
use crate::model::{ModelKind, ModelParams};

pub use nll::{
    factor_with_jitter, gaussian_nll, nll_terms, step_loss, Factor, NllValue, JITTER_BASE,
    JITTER_ESCALATIONS, JITTER_WARN,
};
pub use optim::{clip_global_norm, EpochRecord, RmsProp, StopReason};

use objective::{BekkObjective, DccObjective, GarchObjective, LstmBekkObjective, Objective, Span};
use optim::optimize;
use transform::{
    bekk_from_free, bekk_to_free, garch_from_free, garch_to_free, lstm_bekk_from_free,
    persistence_to_free,
};

/// Optimiser and stopping settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub rmsprop_decay: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Stop when `|dNLL| / max(1, |NLL|)` between epochs falls below this.
    pub convergence_tol: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            rmsprop_decay: 0.9,
            epsilon: 1e-8,
            clip_norm: 1.0,
            max_epochs: 200,
            patience: 10,
            convergence_tol: 1e-6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("epsilon", self.epsilon),
            ("clip_norm", self.clip_norm),
            ("convergence_tol", self.convergence_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Argument(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.rmsprop_decay > 0.0 && self.rmsprop_decay < 1.0) {
            return Err(Error::Argument(format!(
                "rmsprop_decay must lie in (0, 1), got {}",
                self.rmsprop_decay
            )));
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Argument("max_epochs and patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// How the starting persistence pair is chosen. `C` (or each GARCH
/// intercept) is always variance-targeted to the training sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StartRule {
    /// Best training NLL over [`START_PERSISTENCE`] x [`START_SHARE`].
    Grid,
    Fixed { a: f64, b: f64 },
}

/// Candidate values of `a + b` for [`StartRule::Grid`].
pub const START_PERSISTENCE: [f64; 6] = [0.5, 0.8, 0.9, 0.95, 0.98, 0.99];
/// Candidate values of `a / (a + b)`.
pub const START_SHARE: [f64; 4] = [0.02, 0.05, 0.1, 0.2];

impl StartRule {
    pub fn candidates(&self) -> Vec<(f64, f64)> {
        match *self {
            StartRule::Fixed { a, b } => vec![(a, b)],
            StartRule::Grid => START_PERSISTENCE
                .iter()
                .flat_map(|s| START_SHARE.iter().map(move |phi| (s * phi, s * (1.0 - phi))))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LstmInit {
    Xavier,
    Zero,
}

/// Model-specific starting values and switches.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Starting `(a, b)` for every recursion (BEKK, DCC correlation, GARCH).
    pub start: StartRule,
    pub layers: usize,
    pub dropout: f64,
    pub lstm_init: LstmInit,
    /// Explicit starting LSTM weights, overriding `lstm_init`.
    pub lstm_weights: Option<LstmWeights>,
    /// Multiplies the initial projection weights.
    pub projection_scale: f64,
    pub freeze_lstm: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            start: StartRule::Grid,
            layers: 3,
            dropout: 0.1,
            lstm_init: LstmInit::Xavier,
            lstm_weights: None,
            projection_scale: 1.0,
            freeze_lstm: false,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if let StartRule::Fixed { a, b } = self.start {
            crate::garch::check_persistence(a, b)?;
        }
        if !(MIN_LAYERS..=MAX_LAYERS).contains(&self.layers) {
            return Err(Error::Argument(format!(
                "layers must be in {MIN_LAYERS}..={MAX_LAYERS}, got {}",
                self.layers
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Argument(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(self.projection_scale >= 0.0 && self.projection_scale.is_finite()) {
            return Err(Error::Argument("projection_scale must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Outcome of one univariate GARCH fit in the first DCC stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSummary {
    pub asset: String,
    pub params: UnivariateGarchParams,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    pub stop_reason: StopReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: ModelParams,
    /// Per-observation NLL at the returned parameters.
    pub train_nll: f64,
    pub val_nll: f64,
    pub train_nll_sum: f64,
    pub val_nll_sum: f64,
    pub epochs_run: usize,
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    /// State for row 0 of the panel.
    pub initial_carry: Carry,
    /// State after the validation span: the forecast for the first test row.
    pub carry: Carry,
    pub jitter_warning: bool,
    /// First-stage GARCH fits (DCC only).
    pub stage_one: Vec<StageSummary>,
}

/// Fits `kind` on the panel's training span with validation early stopping.
pub fn fit(kind: ModelKind, panel: &ReturnsPanel, cfg: &TrainConfig, opts: &FitOptions) -> Result<FitResult> {
    fit_with_progress(kind, panel, cfg, opts, &mut |_, _| {})
}

/// [`fit`] reporting every epoch as `(stage label, record)`.
pub fn fit_with_progress(
    kind: ModelKind,
    panel: &ReturnsPanel,
    cfg: &TrainConfig,
    opts: &FitOptions,
    progress: &mut dyn FnMut(&str, &EpochRecord),
) -> Result<FitResult> {
    cfg.validate()?;
    opts.validate()?;
    let n = panel.n_assets();
    let splits = panel.splits();
    let span = Span {
        rows: panel.rows(0..splits.val_end),
        n,
        train_rows: splits.train_end,
    };
    match kind {
        ModelKind::ScalarBekk => {
            let (h0, s) = training_moments(panel)?;
            let obj = BekkObjective {
                span,
                h0: h0.clone(),
            };
            let theta0 = choose_start(&obj, opts, |a, b| {
                bekk_to_free(&ScalarBekkParams::new(targeted_c(&s, a, b)?, a, b)?)
            })?;
            let run = optimize(&obj, theta0, cfg, 0, &mut |r| progress("scalar_bekk", r))?;
            let params = ModelParams::ScalarBekk(bekk_from_free(&run.theta, n)?);
            finish(panel, params, Carry::Bekk { h: h0.into_matrix() }, run, Vec::new())
        }
        ModelKind::LstmBekk => {
            let (h0, s) = training_moments(panel)?;
            let lstm = initial_lstm(n, cfg, opts)?;
            // the static block starts where a Scalar BEKK would
            let static_start = choose_start(&BekkObjective { span, h0: h0.clone() }, opts, |a, b| {
                bekk_to_free(&ScalarBekkParams::new(targeted_c(&s, a, b)?, a, b)?)
            })?;
            let mut theta0 = static_start;
            theta0.extend(lstm.flatten());
            let frozen = opts.freeze_lstm.then(|| {
                let fixed = tri_len(n) + 2;
                (0..theta0.len()).map(|i| i >= fixed).collect()
            });
            let obj = LstmBekkObjective {
                span,
                h0: h0.clone(),
                template: lstm,
                dropout: opts.dropout,
                frozen,
            };
            let run = optimize(&obj, theta0, cfg, 0, &mut |r| progress("lstm_bekk", r))?;
            let params = lstm_bekk_from_free(&run.theta, &obj.template)?;
            let init = params.initial_carry(h0.into_matrix());
            finish(panel, ModelParams::LstmBekk(params), init, run, Vec::new())
        }
        ModelKind::Dcc => fit_dcc(panel, span, cfg, opts, progress),
    }
}

/// `H_0` as an SPD matrix plus the raw training second moment.
fn training_moments(panel: &ReturnsPanel) -> Result<(SpdMatrix, Matrix)> {
    let s = panel.train_covariance();
    let h0 = SpdMatrix::new(s.clone()).map_err(|_| {
        Error::Argument("training-sample covariance is singular; reduce n or extend the training span".into())
    })?;
    Ok((h0, s))
}

/// `C` with `CC' = (1 - a - b) S`.
fn targeted_c(s: &Matrix, a: f64, b: f64) -> Result<LowerTriangular> {
    cholesky(&s.scale(1.0 - a - b))
}

/// Evaluates the training NLL at each candidate start and keeps the best;
/// ties go to the earlier candidate.
fn choose_start(
    obj: &dyn Objective,
    opts: &FitOptions,
    to_free: impl Fn(f64, f64) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut last_err = None;
    for (a, b) in opts.start.candidates() {
        let theta = to_free(a, b)?;
        match obj.terms(&theta) {
            Ok(terms) => {
                let v: f64 = terms.iter().sum();
                if v.is_finite() && best.as_ref().is_none_or(|(bv, _)| v < *bv) {
                    best = Some((v, theta));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    match (best, last_err) {
        (Some((_, theta)), _) => Ok(theta),
        (None, Some(e)) => Err(e),
        (None, None) => Err(Error::Argument("no feasible starting point".into())),
    }
}

fn initial_lstm(n: usize, cfg: &TrainConfig, opts: &FitOptions) -> Result<LstmWeights> {
    if let Some(w) = &opts.lstm_weights {
        if w.dim() != n {
            return Err(Error::Argument(format!(
                "initial LSTM weights are for {} assets, panel has {n}",
                w.dim()
            )));
        }
        return Ok(w.clone());
    }
    let mut w = match opts.lstm_init {
        LstmInit::Zero => LstmWeights::zeros(n, opts.layers)?,
        LstmInit::Xavier => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(u64::MAX);
            LstmWeights::xavier(n, opts.layers, &mut rng)?
        }
    };
    if opts.projection_scale != 1.0 {
        w.proj_w.as_mut_slice().iter_mut().for_each(|x| *x *= opts.projection_scale);
    }
    Ok(w)
}

fn fit_dcc(
    panel: &ReturnsPanel,
    span: Span<'_>,
    cfg: &TrainConfig,
    opts: &FitOptions,
    progress: &mut dyn FnMut(&str, &EpochRecord),
) -> Result<FitResult> {
    let n = span.n;
    let t_train = span.train_rows;
    let t_all = span.rows.len() / n;
    let variances = panel.train_variances();
    let mut garch = Vec::with_capacity(n);
    let mut stage_one = Vec::with_capacity(n);
    let mut standardized = vec![0.0; t_train * n];
    for (i, asset) in panel.assets().iter().enumerate() {
        let column: Vec<f64> = (0..t_all).map(|t| span.rows[t * n + i]).collect();
        let h0 = variances[i];
        let obj = GarchObjective {
            rows: column,
            train_rows: t_train,
            h0,
        };
        let theta0 = choose_start(&obj, opts, |a, b| {
            garch_to_free(&UnivariateGarchParams::new((1.0 - a - b) * h0, a, b)?)
        })?;
        let label = format!("dcc/garch[{asset}]");
        let run = optimize(&obj, theta0, cfg, 1 + i as u64, &mut |r| progress(&label, r))?;
        let g = garch_from_free(&run.theta)?;
        let best = run.history[run.best_epoch - 1];
        stage_one.push(StageSummary {
            asset: asset.clone(),
            params: g,
            epochs_run: run.history.len(),
            best_epoch: run.best_epoch,
            train_nll: best.train_nll,
            val_nll: best.val_nll,
            stop_reason: run.stop,
        });
        let path = garch_filter(&g, &obj.rows[..t_train], h0)?;
        for (t, h) in path.h.iter().enumerate() {
            standardized[t * n + i] = obj.rows[t] / h.sqrt();
        }
        garch.push(g);
    }
    let s = estimate_s(&standardized, n, true)?.into_matrix();
    let init = DccCarry {
        var: variances,
        q: s.clone(),
    };
    let obj = DccObjective {
        span,
        garch,
        s,
        init: init.clone(),
    };
    let theta0 = choose_start(&obj, opts, |a, b| {
        let (p, q) = persistence_to_free(a, b)?;
        Ok(vec![p, q])
    })?;
    let run = optimize(&obj, theta0, cfg, 0, &mut |r| progress("dcc", r))?;
    let params = obj.params(&run.theta)?;
    finish(panel, ModelParams::Dcc(params), Carry::Dcc(init), run, stage_one)
}

fn finish(
    panel: &ReturnsPanel,
    params: ModelParams,
    initial_carry: Carry,
    run: optim::Optimized,
    stage_one: Vec<StageSummary>,
) -> Result<FitResult> {
    params.validate()?;
    let splits = panel.splits();
    let n = panel.n_assets();
    let rows = panel.rows(0..splits.val_end);
    let path = params.filter(rows, &initial_carry)?;
    let train = gaussian_nll(&path.h[..splits.train_end], &rows[..splits.train_end * n])?;
    let val = gaussian_nll(&path.h[splits.train_end..], &rows[splits.train_end * n..])?;
    let jitter_warning = train.jitter_warning()
        || val.jitter_warning()
        || run.history.iter().any(|r| r.jitter > JITTER_WARN);
    Ok(FitResult {
        params,
        train_nll: train.mean,
        val_nll: val.mean,
        train_nll_sum: train.sum,
        val_nll_sum: val.sum,
        epochs_run: run.history.len(),
        best_epoch: run.best_epoch,
        history: run.history,
        stop_reason: run.stop,
        initial_carry,
        carry: path.carry,
        jitter_warning,
        stage_one,
    })
}

/// Result of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinates with `max(|analytic|, |numeric|) > 1e-8`.
    pub checked: usize,
    pub total: usize,
    pub worst_index: Option<usize>,
    /// Analytic and numeric derivative at `worst_index`.
    pub worst_pair: (f64, f64),
}

impl GradCheckReport {
    fn merge(self, other: GradCheckReport, offset: usize) -> GradCheckReport {
        let (max_rel_error, worst_index, worst_pair) = if other.max_rel_error > self.max_rel_error {
            (other.max_rel_error, other.worst_index.map(|i| i + offset), other.worst_pair)
        } else {
            (self.max_rel_error, self.worst_index, self.worst_pair)
        };
        GradCheckReport {
            max_rel_error,
            checked: self.checked + other.checked,
            total: self.total + other.total,
            worst_index,
            worst_pair,
        }
    }
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

fn check_objective(obj: &dyn Objective, theta: &[f64]) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, analytic) = obj.value_grad(theta, &mut rng)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        total: theta.len(),
        worst_index: None,
        worst_pair: (0.0, 0.0),
    };
    let mut x = theta.to_vec();
    for i in 0..theta.len() {
        x[i] = theta[i] + GRAD_CHECK_STEP;
        let up = obj.terms(&x)?;
        x[i] = theta[i] - GRAD_CHECK_STEP;
        let down = obj.terms(&x)?;
        x[i] = theta[i];
        // differencing term by term keeps the roundoff at the level of one term
        let diff: f64 = up.iter().zip(&down).map(|(u, d)| u - d).sum();
        let numeric = diff / (2.0 * GRAD_CHECK_STEP * up.len() as f64);
        let scale = analytic[i].abs().max(numeric.abs());
        if scale <= GRAD_CHECK_FLOOR {
            continue;
        }
        report.checked += 1;
        let rel = (analytic[i] - numeric).abs() / scale;
        if report.worst_index.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = Some(i);
            report.worst_pair = (analytic[i], numeric);
        }
    }
    Ok(report)
}

/// Compares the reverse-mode gradient of the mean training NLL with central
/// differences at a random point drawn from `seed`, on a small return block
/// (`n <= 3`, `T <= 20`). For DCC both stages are checked.
pub fn grad_check(kind: ModelKind, returns: &[f64], n: usize, seed: u64) -> Result<GradCheckReport> {
    let t_len = check_rows(returns, n)?;
    if n > 3 || t_len > 20 || t_len < n + 2 {
        return Err(Error::Argument(format!(
            "gradient check needs n <= 3 and n + 2 <= T <= 20, got n = {n}, T = {t_len}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = Span {
        rows: returns,
        n,
        train_rows: t_len,
    };
    let second = sample_second_moment(returns, n);
    let h0 = SpdMatrix::new(second.clone())
        .or_else(|_| SpdMatrix::new(Matrix::from_diag(&vec![second.trace() / n as f64 + 1e-3; n])))?;
    let static_block = |rng: &mut ChaCha8Rng| {
        let mut v = Vec::with_capacity(tri_len(n) + 2);
        for i in 0..n {
            for j in 0..=i {
                v.push(if i == j {
                    rng.random_range(-1.0..0.5)
                } else {
                    rng.random_range(-0.3..0.3)
                });
            }
        }
        v.push(rng.random_range(0.5..2.5));
        v.push(rng.random_range(-2.5..-0.5));
        v
    };
    match kind {
        ModelKind::ScalarBekk => {
            let theta = static_block(&mut rng);
            check_objective(&BekkObjective { span, h0 }, &theta)
        }
        ModelKind::LstmBekk => {
            // dynamic term large next to CC' so every weight moves the loss visibly
            let mut lstm = LstmWeights::xavier(n, MIN_LAYERS, &mut rng)?;
            lstm.beta = rng.random_range(0.5..1.5);
            lstm.proj_w.as_mut_slice().iter_mut().for_each(|w| *w *= 3.0);
            for b in lstm.proj_b.iter_mut() {
                *b = rng.random_range(-1.0..1.0);
            }
            let mut theta = static_block(&mut rng);
            for i in 0..n {
                theta[i * (i + 1) / 2 + i] -= 1.5;
            }
            theta.extend(lstm.flatten());
            let obj = LstmBekkObjective {
                span,
                h0,
                template: lstm,
                dropout: 0.0,
                frozen: None,
            };
            check_objective(&obj, &theta)
        }
        ModelKind::Dcc => {
            let mut garch = Vec::with_capacity(n);
            let mut report: Option<GradCheckReport> = None;
            let mut variances = Vec::with_capacity(n);
            let mut standardized = vec![0.0; t_len * n];
            for i in 0..n {
                let column: Vec<f64> = returns.chunks_exact(n).map(|r| r[i]).collect();
                let var = second.get(i, i).max(1e-6);
                let g = UnivariateGarchParams::new(
                    rng.random_range(0.05..0.3),
                    rng.random_range(0.02..0.15),
                    rng.random_range(0.6..0.8),
                )?;
                let obj = GarchObjective {
                    rows: column.clone(),
                    train_rows: t_len,
                    h0: var,
                };
                let part = check_objective(&obj, &garch_to_free(&g)?)?;
                let offset = report.as_ref().map_or(0, |r| r.total);
                report = Some(match report {
                    None => part,
                    Some(r) => r.merge(part, offset),
                });
                let path = garch_filter(&g, &column, var)?;
                for (t, h) in path.h.iter().enumerate() {
                    standardized[t * n + i] = column[t] / h.sqrt();
                }
                variances.push(var);
                garch.push(g);
            }
            let s = estimate_s(&standardized, n, true)?.into_matrix();
            let obj = DccObjective {
                span,
                garch,
                s: s.clone(),
                init: DccCarry { var: variances, q: s },
            };
            let theta = [rng.random_range(0.5..2.5), rng.random_range(-2.5..-0.5)];
            let part = check_objective(&obj, &theta)?;
            let r = report.expect("n >= 1");
            let offset = r.total;
            Ok(r.merge(part, offset))
        }
    }
}

