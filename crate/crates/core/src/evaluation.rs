//! Out-of-sample comparison: test-span losses, paired t-tests and the Model
//! Confidence Set with a stationary bootstrap.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{random_subpanel, ReturnsPanel};
use crate::error::{Error, Result};
use crate::estimation::{fit, nll_terms, FitOptions, FitResult, TrainConfig};
use crate::garch::Carry;
use crate::linalg::Matrix;
use crate::model::{ModelKind, ModelParams};
use crate::report::{num, Table};

/// Per-period NLL terms of one model over a common span.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSeries {
    pub label: String,
    pub losses: Vec<f64>,
}

impl LossSeries {
    pub fn new(label: impl Into<String>, losses: Vec<f64>) -> Result<Self> {
        let label = label.into();
        if let Some(t) = losses.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric {
                step: t,
                message: format!("loss of '{label}' is not finite"),
            });
        }
        Ok(Self { label, losses })
    }

    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    pub fn mean(&self) -> f64 {
        mean(&self.losses)
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation (denominator `len - 1`).
pub fn sample_sd(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

fn median(x: &[f64]) -> f64 {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k == 0 {
        f64::NAN
    } else if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Forecast covariances for every test row, continuing from the carry the
/// fit left at the end of the validation span.
pub fn test_covariances(fit: &FitResult, panel: &ReturnsPanel) -> Result<Vec<Matrix>> {
    check_panel(&fit.params, panel)?;
    Ok(fit.params.filter(panel.test(), &fit.carry)?.h)
}

/// Test-span losses of a fitted model with its parameters held fixed.
pub fn test_nll(fit: &FitResult, panel: &ReturnsPanel) -> Result<LossSeries> {
    check_panel(&fit.params, panel)?;
    loss_series(fit.params.kind().as_str(), &fit.params, &fit.carry, panel.test())
}

/// Losses of `params` on `returns` starting from `init`.
pub fn loss_series(label: &str, params: &ModelParams, init: &Carry, returns: &[f64]) -> Result<LossSeries> {
    let path = params.filter(returns, init)?;
    let (terms, _) = nll_terms(&path.h, returns)?;
    LossSeries::new(label, terms)
}

fn check_panel(params: &ModelParams, panel: &ReturnsPanel) -> Result<()> {
    if params.dim() != panel.n_assets() {
        return Err(Error::Argument(format!(
            "model has {} assets, panel has {}",
            params.dim(),
            panel.n_assets()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTestResult {
    /// `mean(a - b)`.
    pub mean_diff: f64,
    pub t: f64,
    /// Two-sided.
    pub p_value: f64,
    pub n: usize,
    /// The differences have zero spread but nonzero mean.
    pub degenerate: bool,
}

/// Paired two-sided t-test on `a - b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!("paired samples differ in length ({} vs {})", a.len(), b.len())));
    }
    let m = a.len();
    if m < 2 {
        return Err(Error::InsufficientData { needed: 2, got: m });
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().any(|x| !x.is_finite()) {
        return Err(Error::Argument("paired samples contain non-finite values".into()));
    }
    let mean_diff = mean(&d);
    let sd = sample_sd(&d);
    if sd == 0.0 {
        let (t, p_value, degenerate) = if mean_diff == 0.0 {
            (0.0, 1.0, false)
        } else {
            (mean_diff.signum() * f64::INFINITY, 0.0, true)
        };
        return Ok(TTestResult { mean_diff, t, p_value, n: m, degenerate });
    }
    let t = mean_diff / (sd / (m as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (m - 1) as f64).map_err(|e| Error::Argument(e.to_string()))?;
    let p_value = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(TTestResult { mean_diff, t, p_value, n: m, degenerate: false })
}

/// Model Confidence Set settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McsConfig {
    /// Models with p-value above this are retained.
    pub level: f64,
    /// Mean block length of the stationary bootstrap.
    pub block_mean: f64,
    pub resamples: usize,
    pub seed: u64,
}

impl Default for McsConfig {
    fn default() -> Self {
        Self {
            level: 0.10,
            block_mean: 20.0,
            resamples: 1000,
            seed: 0,
        }
    }
}

impl McsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Argument(format!("MCS level must lie in (0, 1), got {}", self.level)));
        }
        if !(self.block_mean >= 1.0) {
            return Err(Error::Argument(format!("block mean must be at least 1, got {}", self.block_mean)));
        }
        if self.resamples == 0 {
            return Err(Error::Argument("need at least one bootstrap resample".into()));
        }
        Ok(())
    }
}

/// Series shorter than this get a reliability warning.
pub const MCS_WARN_LEN: usize = 50;
pub const MCS_MIN_LEN: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct McsResult {
    pub labels: Vec<String>,
    /// MCS p-value of each model, in input order.
    pub p_values: Vec<f64>,
    /// Model indices from first eliminated to last standing.
    pub elimination_order: Vec<usize>,
    pub included: Vec<bool>,
    pub warning: Option<String>,
}

impl McsResult {
    pub fn survivors(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.included[i]).collect()
    }
}

/// Stationary bootstrap indices: blocks start uniformly at random, have
/// geometric lengths with mean `block_mean` and wrap around the end.
pub fn stationary_bootstrap_indices(len: usize, block_mean: f64, rng: &mut impl Rng) -> Vec<usize> {
    let restart = 1.0 / block_mean;
    let mut idx = Vec::with_capacity(len);
    let mut cur = rng.random_range(0..len);
    for _ in 0..len {
        idx.push(cur);
        cur = if rng.random::<f64>() < restart {
            rng.random_range(0..len)
        } else {
            (cur + 1) % len
        };
    }
    idx
}

/// Elimination with the `T_max` statistic. Every model is eventually
/// eliminated; p-values are running maxima of the round p-values, so the
/// last model standing gets 1.
pub fn mcs(losses: &[LossSeries], cfg: &McsConfig) -> Result<McsResult> {
    cfg.validate()?;
    let m = losses.len();
    if m < 2 {
        return Err(Error::Argument("the confidence set needs at least two models".into()));
    }
    let t_len = losses[0].len();
    if let Some(s) = losses.iter().find(|s| s.len() != t_len) {
        return Err(Error::Argument(format!(
            "loss series of '{}' has {} periods, '{}' has {t_len}",
            s.label,
            s.len(),
            losses[0].label
        )));
    }
    if t_len < MCS_MIN_LEN {
        return Err(Error::InsufficientData {
            needed: MCS_MIN_LEN,
            got: t_len,
        });
    }
    let warning = (t_len < MCS_WARN_LEN)
        .then(|| format!("only {t_len} periods; bootstrap p-values are unreliable below {MCS_WARN_LEN}"));

    let indices: Vec<Vec<usize>> = (0..cfg.resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(b as u64);
            stationary_bootstrap_indices(t_len, cfg.block_mean, &mut rng)
        })
        .collect();

    let mut alive: Vec<usize> = (0..m).collect();
    let mut p_values = vec![1.0; m];
    let mut order = Vec::with_capacity(m);
    let mut running = 0.0f64;
    while alive.len() > 1 {
        let k = alive.len() as f64;
        // d_{i,t} = L_{i,t} - average over surviving models
        let diffs: Vec<Vec<f64>> = alive
            .iter()
            .map(|&i| {
                (0..t_len)
                    .map(|t| {
                        let avg = alive.iter().map(|&j| losses[j].losses[t]).sum::<f64>() / k;
                        losses[i].losses[t] - avg
                    })
                    .collect()
            })
            .collect();
        let dbar: Vec<f64> = diffs.iter().map(|d| mean(d)).collect();
        let boot: Vec<Vec<f64>> = indices
            .par_iter()
            .map(|idx| {
                diffs
                    .iter()
                    .zip(&dbar)
                    .map(|(d, db)| idx.iter().map(|&t| d[t]).sum::<f64>() / t_len as f64 - db)
                    .collect()
            })
            .collect();
        let se: Vec<f64> = (0..alive.len())
            .map(|i| (boot.iter().map(|b| b[i] * b[i]).sum::<f64>() / cfg.resamples as f64).sqrt())
            .collect();
        let stat = |i: usize, x: f64| {
            if se[i] > 0.0 {
                x / se[i]
            } else if x == 0.0 {
                0.0
            } else {
                x.signum() * f64::INFINITY
            }
        };
        let t_stats: Vec<f64> = (0..alive.len()).map(|i| stat(i, dbar[i])).collect();
        let (worst, t_max) = t_stats
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, t)| if t > acc.1 { (i, t) } else { acc });
        let exceed = boot
            .iter()
            .filter(|b| {
                let t_star = (0..b.len()).map(|i| stat(i, b[i])).fold(f64::NEG_INFINITY, f64::max);
                t_star >= t_max
            })
            .count();
        let p_round = exceed as f64 / cfg.resamples as f64;
        running = running.max(p_round);
        let model = alive.remove(worst);
        p_values[model] = running;
        order.push(model);
    }
    order.push(alive[0]);
    p_values[alive[0]] = 1.0;
    let included = p_values.iter().map(|p| *p > cfg.level).collect();
    Ok(McsResult {
        labels: losses.iter().map(|s| s.label.clone()).collect(),
        p_values,
        elimination_order: order,
        included,
        warning,
    })
}

/// Test-NLL table for models fitted on one panel: mean and sd of the
/// per-period losses, paired t-test of `reference - model` and MCS.
pub fn comparison_report(series: &[LossSeries], reference: usize, mcs_cfg: &McsConfig) -> Result<(Table, McsResult)> {
    if reference >= series.len() {
        return Err(Error::Argument(format!("reference index {reference} out of range")));
    }
    let set = mcs(series, mcs_cfg)?;
    let mut table = Table::new(["model", "mean_nll", "sd", "t", "p", "mcs_p", "included_90"]);
    for (i, s) in series.iter().enumerate() {
        let (t, p) = if i == reference {
            (String::new(), String::new())
        } else {
            let tt = paired_ttest(&series[reference].losses, &s.losses)?;
            (num(tt.t), num(tt.p_value))
        };
        table.push(vec![
            s.label.clone(),
            num(s.mean()),
            num(sample_sd(&s.losses)),
            t,
            p,
            num(set.p_values[i]),
            set.included[i].to_string(),
        ]);
    }
    Ok((table, set))
}

/// Repeated random-subpanel experiment settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PortfolioSpec {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutcome {
    pub kind: ModelKind,
    pub test_nll: f64,
    pub a: f64,
    pub b: f64,
    pub epochs_run: usize,
    pub mcs_p: f64,
    pub included: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioOutcome {
    pub index: usize,
    pub assets: Vec<String>,
    pub models: Vec<ModelOutcome>,
}

/// Seed of the `index`-th random subpanel.
pub fn subpanel_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add(index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Fits every model on `spec.count` random subpanels of `spec.size` assets
/// and scores them on each subpanel's test span. Portfolios run in parallel
/// on the current rayon pool; results are in portfolio order.
pub fn run_repeated(
    panel: &ReturnsPanel,
    kinds: &[ModelKind],
    spec: &PortfolioSpec,
    cfg: &TrainConfig,
    opts: &FitOptions,
    mcs_cfg: &McsConfig,
) -> Result<Vec<PortfolioOutcome>> {
    if kinds.len() < 2 {
        return Err(Error::Argument("need at least two models to compare".into()));
    }
    if spec.count == 0 {
        return Err(Error::Argument("portfolio count must be positive".into()));
    }
    (0..spec.count)
        .into_par_iter()
        .map(|index| {
            let sub = random_subpanel(panel, spec.size, subpanel_seed(spec.seed, index))?;
            let mut series = Vec::with_capacity(kinds.len());
            let mut fits = Vec::with_capacity(kinds.len());
            for &kind in kinds {
                let f = fit(kind, &sub, cfg, opts)?;
                series.push(test_nll(&f, &sub)?);
                fits.push(f);
            }
            let set = mcs(&series, mcs_cfg)?;
            let models = kinds
                .iter()
                .zip(&fits)
                .zip(&series)
                .enumerate()
                .map(|(i, ((&kind, f), s))| {
                    let (a, b) = f.params.persistence_pair();
                    ModelOutcome {
                        kind,
                        test_nll: s.mean(),
                        a,
                        b,
                        epochs_run: f.epochs_run,
                        mcs_p: set.p_values[i],
                        included: set.included[i],
                    }
                })
                .collect();
            Ok(PortfolioOutcome {
                index,
                assets: sub.assets().to_vec(),
                models,
            })
        })
        .collect()
}

/// Per-portfolio test NLL of `kind`, in portfolio order.
pub fn portfolio_nll(outcomes: &[PortfolioOutcome], kind: ModelKind) -> Result<Vec<f64>> {
    outcomes
        .iter()
        .map(|o| {
            o.models
                .iter()
                .find(|m| m.kind == kind)
                .map(|m| m.test_nll)
                .ok_or_else(|| Error::Argument(format!("portfolio {} has no {kind} result", o.index)))
        })
        .collect()
}

/// Across-portfolio summary: NLL mean/median/sd, paired t-test of
/// `reference - model` on per-portfolio means, MCS inclusion rate and
/// mean/median persistence parameters.
pub fn summarize_repeated(outcomes: &[PortfolioOutcome], reference: ModelKind) -> Result<Table> {
    let first = outcomes
        .first()
        .ok_or_else(|| Error::Argument("no portfolio outcomes".into()))?;
    let kinds: Vec<ModelKind> = first.models.iter().map(|m| m.kind).collect();
    let ref_nll = portfolio_nll(outcomes, reference)?;
    let mut table = Table::new([
        "model",
        "portfolios",
        "mean_nll",
        "median_nll",
        "sd_nll",
        "mean_diff",
        "t",
        "p",
        "mcs_inclusion",
        "mean_a",
        "median_a",
        "mean_b",
        "median_b",
    ]);
    for kind in kinds {
        let nll = portfolio_nll(outcomes, kind)?;
        let pick = |f: fn(&ModelOutcome) -> f64| -> Vec<f64> {
            outcomes
                .iter()
                .filter_map(|o| o.models.iter().find(|m| m.kind == kind).map(f))
                .collect()
        };
        let a = pick(|m| m.a);
        let b = pick(|m| m.b);
        let inclusion = pick(|m| if m.included { 1.0 } else { 0.0 });
        let (diff, t, p) = if kind == reference || nll.len() < 2 {
            (String::new(), String::new(), String::new())
        } else {
            let tt = paired_ttest(&ref_nll, &nll)?;
            (num(tt.mean_diff), num(tt.t), num(tt.p_value))
        };
        table.push(vec![
            kind.to_string(),
            nll.len().to_string(),
            num(mean(&nll)),
            num(median(&nll)),
            num(sample_sd(&nll)),
            diff,
            t,
            p,
            num(mean(&inclusion)),
            num(mean(&a)),
            num(median(&a)),
            num(mean(&b)),
            num(median(&b)),
        ]);
    }
    Ok(table)
}

/// One row per (portfolio, model).
pub fn repeated_detail(outcomes: &[PortfolioOutcome]) -> Table {
    let mut table = Table::new(["portfolio", "model", "test_nll", "a", "b", "epochs", "mcs_p", "included_90", "assets"]);
    for o in outcomes {
        for m in &o.models {
            table.push(vec![
                o.index.to_string(),
                m.kind.to_string(),
                num(m.test_nll),
                num(m.a),
                num(m.b),
                m.epochs_run.to_string(),
                num(m.mcs_p),
                m.included.to_string(),
                o.assets.join(" "),
            ]);
        }
    }
    table
}
