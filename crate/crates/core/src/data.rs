//! Return panels: CSV ingestion, demeaning, chronological splits, simulation
//! from known data-generating processes and random asset subsets.
//!
//! All values are percent log-returns. Columns are demeaned with the mean of
//! the training window only, so nothing from the validation or test spans
//! leaks into the data the models are fitted on.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use chrono::{Datelike, Days, NaiveDate, Weekday};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::garch::{DccParams, ScalarBekkParams};
use crate::linalg::{cholesky, Matrix};
use crate::lstm_bekk::LstmBekkParams;
use crate::model::ModelParams;

/// Smallest panel accepted by [`load_csv`].
pub const MIN_ROWS: usize = 10;
pub const TRAIN_FRACTION: f64 = 0.70;
pub const VALIDATION_FRACTION: f64 = 0.15;

/// Chronological split indices: training `[0, train_end)`, validation
/// `[train_end, val_end)`, test `[val_end, T)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Splits {
    pub train_end: usize,
    pub val_end: usize,
}

impl Splits {
    /// 70/15/15 by row count, flooring both boundaries.
    pub fn default_for(t_len: usize) -> Self {
        let train_end = (t_len as f64 * TRAIN_FRACTION).floor() as usize;
        let val_end = (t_len as f64 * (TRAIN_FRACTION + VALIDATION_FRACTION)).floor() as usize;
        Self { train_end, val_end }
    }

    pub fn validate(&self, t_len: usize) -> Result<()> {
        if !(0 < self.train_end && self.train_end < self.val_end && self.val_end < t_len) {
            return Err(Error::Argument(format!(
                "splits must satisfy 0 < train_end ({}) < val_end ({}) < T ({t_len})",
                self.train_end, self.val_end
            )));
        }
        Ok(())
    }
}

/// A `T x n` panel of demeaned percent returns.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnsPanel {
    dates: Vec<NaiveDate>,
    assets: Vec<String>,
    values: Matrix,
    splits: Splits,
    train_means: Vec<f64>,
}

impl ReturnsPanel {
    /// Builds a panel from raw returns, demeaning each column by its
    /// training-window mean.
    pub fn new(
        dates: Vec<NaiveDate>,
        assets: Vec<String>,
        mut values: Matrix,
        splits: Option<Splits>,
    ) -> Result<Self> {
        let t_len = values.rows();
        let n = values.cols();
        if t_len < 2 || n == 0 {
            return Err(Error::InsufficientData { needed: 2, got: t_len });
        }
        if dates.len() != t_len || assets.len() != n {
            return Err(Error::Argument(format!(
                "{} dates and {} labels for a {t_len}x{n} panel",
                dates.len(),
                assets.len()
            )));
        }
        for (i, w) in dates.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(Error::Ordering {
                    row: i + 1,
                    previous: w[0].to_string(),
                    current: w[1].to_string(),
                });
            }
        }
        if let Some((idx, _)) = values.as_slice().iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Ingestion {
                row: idx / n,
                column: assets[idx % n].clone(),
                message: "value is not finite".into(),
            });
        }
        let splits = splits.unwrap_or_else(|| Splits::default_for(t_len));
        splits.validate(t_len)?;
        let train_means = demean_by_window(&mut values, splits.train_end);
        Ok(Self {
            dates,
            assets,
            values,
            splits,
            train_means,
        })
    }

    #[inline]
    pub fn n_assets(&self) -> usize {
        self.values.cols()
    }

    #[inline]
    pub fn n_obs(&self) -> usize {
        self.values.rows()
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn assets(&self) -> &[String] {
        &self.assets
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn splits(&self) -> Splits {
        self.splits
    }

    /// Column means that were subtracted (training window).
    pub fn train_means(&self) -> &[f64] {
        &self.train_means
    }

    /// Row-major values of rows in `range`.
    pub fn rows(&self, range: Range<usize>) -> &[f64] {
        let n = self.n_assets();
        &self.values.as_slice()[range.start * n..range.end * n]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.values.row(t)
    }

    pub fn train_range(&self) -> Range<usize> {
        0..self.splits.train_end
    }

    pub fn validation_range(&self) -> Range<usize> {
        self.splits.train_end..self.splits.val_end
    }

    pub fn test_range(&self) -> Range<usize> {
        self.splits.val_end..self.n_obs()
    }

    pub fn train(&self) -> &[f64] {
        self.rows(self.train_range())
    }

    pub fn validation(&self) -> &[f64] {
        self.rows(self.validation_range())
    }

    pub fn test(&self) -> &[f64] {
        self.rows(self.test_range())
    }

    /// `(1/T) sum r r'` over the training window.
    pub fn train_covariance(&self) -> Matrix {
        sample_second_moment(self.train(), self.n_assets())
    }

    /// Per-asset `(1/T) sum r^2` over the training window.
    pub fn train_variances(&self) -> Vec<f64> {
        self.train_covariance().diag()
    }

    /// Keeps the listed columns in the given order. Split indices, dates and
    /// subtracted means are carried over unchanged.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        let n = self.n_assets();
        if cols.is_empty() || cols.iter().any(|&c| c >= n) {
            return Err(Error::Argument(format!("column selection {cols:?} out of range for {n} assets")));
        }
        let t_len = self.n_obs();
        let mut data = Vec::with_capacity(t_len * cols.len());
        for t in 0..t_len {
            let row = self.row(t);
            data.extend(cols.iter().map(|&c| row[c]));
        }
        Ok(Self {
            dates: self.dates.clone(),
            assets: cols.iter().map(|&c| self.assets[c].clone()).collect(),
            values: Matrix::from_vec(t_len, cols.len(), data)?,
            splits: self.splits,
            train_means: cols.iter().map(|&c| self.train_means[c]).collect(),
        })
    }
}

pub(crate) fn sample_second_moment(rows: &[f64], n: usize) -> Matrix {
    let t_len = rows.len() / n;
    let mut s = Matrix::zeros(n, n);
    for r in rows.chunks_exact(n) {
        for i in 0..n {
            for j in 0..=i {
                let v = s.get(i, j) + r[i] * r[j];
                s.set(i, j, v);
            }
        }
    }
    let inv = 1.0 / t_len as f64;
    for i in 0..n {
        for j in 0..=i {
            let v = s.get(i, j) * inv;
            s.set(i, j, v);
            s.set(j, i, v);
        }
    }
    s
}

/// `100 * (ln p_t - ln p_{t-1})`.
pub fn log_returns_percent(prices: &[f64]) -> Vec<f64> {
    prices.windows(2).map(|w| 100.0 * (w[1].ln() - w[0].ln())).collect()
}

/// Subtracts from every column its mean over rows `[0, window_end)` and
/// returns those means.
pub fn demean_by_window(values: &mut Matrix, window_end: usize) -> Vec<f64> {
    let n = values.cols();
    let mut means = vec![0.0; n];
    for t in 0..window_end {
        for (m, v) in means.iter_mut().zip(values.row(t)) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= window_end as f64);
    for row in values.as_mut_slice().chunks_exact_mut(n) {
        row.iter_mut().zip(&means).for_each(|(v, m)| *v -= m);
    }
    means
}

/// Whether a CSV body holds prices or returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueKind {
    Prices,
    Returns,
}

/// Reads `date,asset1,...,assetn`. Prices are turned into percent log-returns
/// (dropping the first row); the result is demeaned and split 70/15/15 unless
/// `splits` overrides that.
pub fn load_csv(path: &Path, kind: ValueKind, splits: Option<Splits>) -> Result<ReturnsPanel> {
    let file = File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = reader.headers()?.clone();
    if header.len() < 2 {
        return Err(Error::Ingestion {
            row: 1,
            column: header.get(0).unwrap_or("").to_string(),
            message: "header needs a date column and at least one asset".into(),
        });
    }
    let assets: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let n = assets.len();

    let mut dates = Vec::new();
    let mut raw = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // file line numbers: header is line 1
        let line = i + 2;
        let record = record?;
        let date_field = record.get(0).unwrap_or("").trim();
        let date = NaiveDate::parse_from_str(date_field, "%Y-%m-%d").map_err(|e| Error::Ingestion {
            row: line,
            column: header.get(0).unwrap_or("date").to_string(),
            message: format!("bad date '{date_field}': {e}"),
        })?;
        if let Some(prev) = dates.last() {
            if date <= *prev {
                return Err(Error::Ordering {
                    row: line,
                    previous: prev.to_string(),
                    current: date.to_string(),
                });
            }
        }
        dates.push(date);
        for (j, asset) in assets.iter().enumerate() {
            let field = record.get(j + 1).map(str::trim).unwrap_or("");
            if field.is_empty() {
                return Err(Error::Ingestion {
                    row: line,
                    column: asset.clone(),
                    message: "missing value".into(),
                });
            }
            let v: f64 = field.parse().map_err(|_| Error::Ingestion {
                row: line,
                column: asset.clone(),
                message: format!("not a number: '{field}'"),
            })?;
            if !v.is_finite() || (kind == ValueKind::Prices && v <= 0.0) {
                return Err(Error::Ingestion {
                    row: line,
                    column: asset.clone(),
                    message: format!("invalid value {v}"),
                });
            }
            raw.push(v);
        }
    }

    let (dates, values) = match kind {
        ValueKind::Returns => (dates, raw),
        ValueKind::Prices => {
            let t_prices = dates.len();
            let mut out = Vec::with_capacity(t_prices.saturating_sub(1) * n);
            for t in 1..t_prices {
                for j in 0..n {
                    let p = [raw[(t - 1) * n + j], raw[t * n + j]];
                    out.push(log_returns_percent(&p)[0]);
                }
            }
            (dates.into_iter().skip(1).collect(), out)
        }
    };
    let t_len = dates.len();
    if t_len < MIN_ROWS {
        return Err(Error::InsufficientData {
            needed: MIN_ROWS,
            got: t_len,
        });
    }
    ReturnsPanel::new(dates, assets, Matrix::from_vec(t_len, n, values)?, splits)
}

/// Writes the panel values as CSV with 12 decimal places.
pub fn write_csv(panel: &ReturnsPanel, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_csv_to(panel, &mut out)?;
    out.flush()?;
    Ok(())
}

/// [`write_csv`] into a string.
pub fn write_csv_string(panel: &ReturnsPanel) -> Result<String> {
    let mut buf = Vec::new();
    write_csv_to(panel, &mut buf)?;
    Ok(String::from_utf8(buf).expect("formatted numbers and names are utf-8"))
}

fn write_csv_to(panel: &ReturnsPanel, out: &mut impl Write) -> Result<()> {
    write!(out, "date")?;
    for a in panel.assets() {
        write!(out, ",{a}")?;
    }
    writeln!(out)?;
    for (t, d) in panel.dates().iter().enumerate() {
        write!(out, "{}", d.format("%Y-%m-%d"))?;
        for v in panel.row(t) {
            write!(out, ",{v:.12}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Data-generating process for [`simulate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Dgp {
    IidGaussian { cov: Matrix },
    ScalarBekk(ScalarBekkParams),
    Dcc(DccParams),
    LstmBekk(LstmBekkParams),
}

impl Dgp {
    pub fn dim(&self) -> usize {
        match self {
            Dgp::IidGaussian { cov } => cov.rows(),
            Dgp::ScalarBekk(p) => p.dim(),
            Dgp::Dcc(p) => p.dim(),
            Dgp::LstmBekk(p) => p.dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Dgp::IidGaussian { cov } => {
                cholesky(cov).map_err(|_| Error::Constraint("covariance is not positive definite".into()))?;
                Ok(())
            }
            Dgp::ScalarBekk(p) => p.validate(),
            Dgp::Dcc(p) => p.validate(),
            Dgp::LstmBekk(p) => p.validate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSpec {
    pub dgp: Dgp,
    pub t: usize,
    pub seed: u64,
}

/// Business days starting 2000-01-03.
pub fn business_days(count: usize) -> Vec<NaiveDate> {
    let mut d = NaiveDate::from_ymd_opt(2000, 1, 3).expect("valid date");
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d + Days::new(1);
    }
    out
}

/// Draws `r_t ~ N(0, H_t)` with `H_t` from the chosen recursion, started at
/// the process's long-run covariance. Deterministic given the seed.
pub fn simulate(spec: &SimulationSpec) -> Result<ReturnsPanel> {
    spec.dgp.validate()?;
    let n = spec.dgp.dim();
    if spec.t < MIN_ROWS {
        return Err(Error::InsufficientData {
            needed: MIN_ROWS,
            got: spec.t,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut draw = |h: &Matrix, step: usize| -> Result<Vec<f64>> {
        let l = cholesky(h).map_err(|e| e.at_step(step))?;
        let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Ok((0..n).map(|i| (0..=i).map(|j| l.get(i, j) * eps[j]).sum()).collect())
    };
    let mut values = Vec::with_capacity(spec.t * n);
    match &spec.dgp {
        Dgp::IidGaussian { cov } => {
            for t in 0..spec.t {
                values.extend(draw(cov, t)?);
            }
        }
        dgp => {
            let model = match dgp {
                Dgp::ScalarBekk(p) => ModelParams::ScalarBekk(p.clone()),
                Dgp::Dcc(p) => ModelParams::Dcc(p.clone()),
                Dgp::LstmBekk(p) => ModelParams::LstmBekk(p.clone()),
                Dgp::IidGaussian { .. } => unreachable!(),
            };
            let mut carry = model.unconditional_carry();
            let mut h = carry.covariance();
            for t in 0..spec.t {
                let r = draw(&h, t)?;
                h = model.advance(&mut carry, &r).map_err(|e| e.at_step(t))?;
                values.extend(r);
            }
        }
    }
    let assets = (1..=n).map(|i| format!("asset{i}")).collect();
    ReturnsPanel::new(
        business_days(spec.t),
        assets,
        Matrix::from_vec(spec.t, n, values)?,
        None,
    )
}

/// `k` distinct columns chosen uniformly without replacement.
pub fn random_subpanel(panel: &ReturnsPanel, k: usize, seed: u64) -> Result<ReturnsPanel> {
    let n = panel.n_assets();
    if k == 0 || k > n {
        return Err(Error::Argument(format!("cannot choose {k} of {n} assets")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cols = sample(&mut rng, n, k).into_vec();
    panel.select_columns(&cols)
}
