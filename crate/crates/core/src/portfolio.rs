//! Global-minimum-variance portfolios from covariance forecasts, the
//! equally-weighted baseline, and performance and tail-risk metrics.
//!
//! Returns are in percent. Portfolio value compounds as `prod(1 + r/100)`.

use chrono::NaiveDate;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::data::ReturnsPanel;
use crate::error::{Error, Result};
use crate::estimation::FitResult;
use crate::evaluation::{sample_sd, test_covariances};
use crate::linalg::{cholesky, Matrix};
use crate::report::{num, Table};

pub const TRADING_DAYS: f64 = 252.0;
pub const DEFAULT_LEVELS: [f64; 2] = [0.01, 0.05];

/// `H^{-1} 1 / (1' H^{-1} 1)`; weights may be negative.
pub fn gmv_weights(h: &Matrix) -> Result<Vec<f64>> {
    let l = cholesky(h)?;
    let x = l.solve(&vec![1.0; h.rows()]);
    let total: f64 = x.iter().sum();
    Ok(x.into_iter().map(|v| v / total).collect())
}

pub fn portfolio_variance(w: &[f64], h: &Matrix) -> f64 {
    w.iter().zip(h.matvec(w)).map(|(a, b)| a * b).sum()
}

/// Arithmetic mean times 252.
pub fn annualized_return(r: &[f64]) -> f64 {
    r.iter().sum::<f64>() / r.len() as f64 * TRADING_DAYS
}

/// Sample standard deviation times `sqrt(252)`.
pub fn annualized_volatility(r: &[f64]) -> f64 {
    sample_sd(r) * TRADING_DAYS.sqrt()
}

/// Largest relative peak-to-trough decline of a value path (`<= 0`).
pub fn max_drawdown_from_values(v: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut worst = 0.0f64;
    for &x in v {
        peak = peak.max(x);
        worst = worst.min((x - peak) / peak);
    }
    worst
}

/// Drawdown of the value path that starts at 1 and compounds `r` percent.
pub fn max_drawdown(r: &[f64]) -> f64 {
    let values: Vec<f64> = std::iter::once(1.0)
        .chain(r.iter().scan(1.0, |v, x| {
            *v *= 1.0 + x / 100.0;
            Some(*v)
        }))
        .collect();
    max_drawdown_from_values(&values)
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Mean-zero Gaussian `(VaR, ES)` at level `alpha` for volatility `sigma`;
/// both negative for `alpha < 0.5`.
pub fn gaussian_var_es(sigma: f64, alpha: f64) -> (f64, f64) {
    let n = std_normal();
    let z = n.inverse_cdf(alpha);
    (z * sigma, -sigma * n.pdf(z) / alpha)
}

/// `(alpha - 1{r < q}) (r - q)`.
pub fn quantile_loss(r: f64, q: f64, alpha: f64) -> f64 {
    let hit = if r < q { 1.0 } else { 0.0 };
    (alpha - hit) * (r - q)
}

/// Joint VaR/ES loss of the asymmetric-Laplace form:
/// `-ln((alpha - 1)/es) - (r - q)(alpha - 1{r <= q}) / (alpha es)`.
pub fn joint_al_loss(r: f64, q: f64, es: f64, alpha: f64) -> Result<f64> {
    if !(es < 0.0) {
        return Err(Error::Argument(format!("joint loss needs es < 0, got {es}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Argument(format!("level must lie in (0, 1), got {alpha}")));
    }
    let hit = if r <= q { 1.0 } else { 0.0 };
    Ok(-((alpha - 1.0) / es).ln() - (r - q) * (alpha - hit) / (alpha * es))
}

/// Tail-risk forecasts and scores at one level.
#[derive(Debug, Clone, PartialEq)]
pub struct TailRisk {
    pub alpha: f64,
    pub var: Vec<f64>,
    pub es: Vec<f64>,
    /// Summed quantile loss.
    pub qloss: f64,
    /// Average joint loss.
    pub joint_loss: f64,
    /// Share of periods with `r < VaR`.
    pub hit_rate: f64,
}

impl TailRisk {
    pub fn score(alpha: f64, returns: &[f64], sigma: &[f64]) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 0.5) {
            return Err(Error::Argument(format!("tail level must lie in (0, 0.5), got {alpha}")));
        }
        let (var, es): (Vec<f64>, Vec<f64>) = sigma.iter().map(|s| gaussian_var_es(*s, alpha)).unzip();
        let mut qloss = 0.0;
        let mut joint = 0.0;
        let mut hits = 0usize;
        for (t, ((r, q), e)) in returns.iter().zip(&var).zip(&es).enumerate() {
            qloss += quantile_loss(*r, *q, alpha);
            joint += joint_al_loss(*r, *q, *e, alpha).map_err(|err| Error::Numeric {
                step: t,
                message: err.to_string(),
            })?;
            hits += usize::from(r < q);
        }
        let len = returns.len() as f64;
        Ok(Self {
            alpha,
            var,
            es,
            qloss,
            joint_loss: joint / len,
            hit_rate: hits as f64 / len,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestResult {
    pub label: String,
    pub dates: Vec<NaiveDate>,
    /// Realized portfolio returns, percent.
    pub returns: Vec<f64>,
    pub ar: f64,
    pub av: f64,
    pub mdd: f64,
    /// Empty for strategies without a covariance forecast.
    pub tails: Vec<TailRisk>,
}

/// Test-span returns with the training mean added back.
fn realized_test_returns(panel: &ReturnsPanel) -> Vec<Vec<f64>> {
    let means = panel.train_means();
    panel
        .test_range()
        .map(|t| panel.row(t).iter().zip(means).map(|(r, m)| r + m).collect())
        .collect()
}

fn summarize(label: &str, panel: &ReturnsPanel, returns: Vec<f64>, tails: Vec<TailRisk>) -> BacktestResult {
    BacktestResult {
        label: label.to_string(),
        dates: panel.dates()[panel.test_range()].to_vec(),
        ar: annualized_return(&returns),
        av: annualized_volatility(&returns),
        mdd: max_drawdown(&returns),
        returns,
        tails,
    }
}

/// GMV backtest over the test span given one forecast per test row.
pub fn backtest_gmv(label: &str, forecasts: &[Matrix], panel: &ReturnsPanel, levels: &[f64]) -> Result<BacktestResult> {
    let realized = realized_test_returns(panel);
    if forecasts.len() != realized.len() {
        return Err(Error::Argument(format!(
            "{} forecasts for {} test periods",
            forecasts.len(),
            realized.len()
        )));
    }
    if realized.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let mut returns = Vec::with_capacity(realized.len());
    let mut sigma = Vec::with_capacity(realized.len());
    for (t, (h, r)) in forecasts.iter().zip(&realized).enumerate() {
        let w = gmv_weights(h).map_err(|e| e.at_step(t))?;
        returns.push(w.iter().zip(r).map(|(a, b)| a * b).sum());
        sigma.push(portfolio_variance(&w, h).sqrt());
    }
    let tails = levels
        .iter()
        .map(|&alpha| TailRisk::score(alpha, &returns, &sigma))
        .collect::<Result<_>>()?;
    Ok(summarize(label, panel, returns, tails))
}

/// GMV backtest of a fitted model with frozen parameters.
pub fn backtest(fit: &FitResult, panel: &ReturnsPanel, levels: &[f64]) -> Result<BacktestResult> {
    let forecasts = test_covariances(fit, panel)?;
    backtest_gmv(fit.params.kind().as_str(), &forecasts, panel, levels)
}

/// Equally-weighted portfolio, rebalanced to `1/n` every period.
pub fn backtest_equal_weight(panel: &ReturnsPanel) -> BacktestResult {
    let n = panel.n_assets() as f64;
    let returns = realized_test_returns(panel)
        .iter()
        .map(|r| r.iter().sum::<f64>() / n)
        .collect();
    summarize("equal_weight", panel, returns, Vec::new())
}

/// One row per (model, portfolio size, metric).
pub fn backtest_table(results: &[BacktestResult], portfolio_size: usize) -> Table {
    let mut table = Table::new(["model", "portfolio_size", "metric", "value"]);
    for r in results {
        let mut row = |metric: String, v: f64| {
            table.push(vec![r.label.clone(), portfolio_size.to_string(), metric, num(v)]);
        };
        row("ar".into(), r.ar);
        row("av".into(), r.av);
        row("mdd".into(), r.mdd);
        for tail in &r.tails {
            row(format!("qloss_{}", tail.alpha), tail.qloss);
            row(format!("joint_loss_{}", tail.alpha), tail.joint_loss);
            row(format!("hit_rate_{}", tail.alpha), tail.hit_rate);
        }
    }
    table
}

/// `(date, model, level, var, es, realized)` for every model with forecasts.
pub fn tail_series_table(results: &[BacktestResult]) -> Table {
    let mut table = Table::new(["date", "model", "level", "var", "es", "realized"]);
    for r in results {
        for tail in &r.tails {
            for (t, date) in r.dates.iter().enumerate() {
                table.push(vec![
                    date.format("%Y-%m-%d").to_string(),
                    r.label.clone(),
                    tail.alpha.to_string(),
                    num(tail.var[t]),
                    num(tail.es[t]),
                    num(r.returns[t]),
                ]);
            }
        }
    }
    table
}
