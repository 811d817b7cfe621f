//! One function per subcommand.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate, Weekday};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use deepbekk::data::{self, load_csv, write_csv_string, Dgp, ReturnsPanel, SimulationSpec};
use deepbekk::estimation::{fit_with_progress, grad_check as check_gradients, FitResult};
use deepbekk::evaluation::{comparison_report, loss_series, repeated_detail, run_repeated, summarize_repeated};
use deepbekk::linalg::{cholesky, Matrix};
use deepbekk::lstm::LstmWeights;
use deepbekk::lstm_bekk::{check_theorem_bound, LstmBekkParams};
use deepbekk::portfolio::{backtest_equal_weight, backtest_gmv, backtest_table, tail_series_table};
use deepbekk::report::{num, Table};
use deepbekk::ModelKind;

use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, ExperimentConfig, Resolved};
use crate::output::{write_atomic, Staged};
use crate::CliError;

fn load_config(path: &Path) -> Result<Resolved, CliError> {
    let base = path.parent().unwrap_or(Path::new("."));
    ExperimentConfig::load(path)?.resolve(base)
}

fn load_panel(r: &Resolved) -> Result<ReturnsPanel, CliError> {
    match &r.data {
        DataSource::Csv { path, kind, splits } => {
            if !path.is_file() {
                return Err(CliError::Data(format!("cannot read {}: no such file", path.display())));
            }
            load_csv(path, *kind, *splits).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
        }
        DataSource::Simulate { spec, splits } => {
            let panel = data::simulate(spec)?;
            match splits {
                None => Ok(panel),
                // re-demeaning an already demeaned panel with a new window
                // equals demeaning the raw draws with that window
                Some(s) => Ok(ReturnsPanel::new(
                    panel.dates().to_vec(),
                    panel.assets().to_vec(),
                    panel.values().clone(),
                    Some(*s),
                )?),
            }
        }
    }
}

/// Identifies the panel a checkpoint was fitted on.
fn panel_hash(panel: &ReturnsPanel) -> [u8; 32] {
    let mut h = Sha256::new();
    for a in panel.assets() {
        h.update(a.as_bytes());
        h.update([0]);
    }
    for d in panel.dates() {
        h.update(d.num_days_from_ce().to_le_bytes());
    }
    for v in panel.values().as_slice() {
        h.update(v.to_le_bytes());
    }
    let s = panel.splits();
    h.update((s.train_end as u64).to_le_bytes());
    h.update((s.val_end as u64).to_le_bytes());
    h.finalize().into()
}

fn load_checkpoint(path: &Path, panel: &ReturnsPanel, expected: &[u8; 32]) -> Result<Checkpoint, CliError> {
    let ck = Checkpoint::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if &ck.panel_hash != expected {
        return Err(CliError::Data(format!(
            "{} was fitted on a different panel than the configured one",
            path.display()
        )));
    }
    if ck.params.dim() != panel.n_assets() {
        return Err(CliError::Data(format!(
            "{} has {} assets, panel has {}",
            path.display(),
            ck.params.dim(),
            panel.n_assets()
        )));
    }
    Ok(ck)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// File stems, with `#k` appended to repeats.
fn unique_labels(paths: &[PathBuf]) -> Vec<String> {
    let mut seen: HashMap<String, usize> = HashMap::new();
    paths
        .iter()
        .map(|p| {
            let s = stem(p);
            let k = seen.entry(s.clone()).or_insert(0);
            *k += 1;
            if *k == 1 {
                s
            } else {
                format!("{s}#{k}")
            }
        })
        .collect()
}

fn csv_bytes(t: &Table) -> Result<Vec<u8>, CliError> {
    Ok(t.to_csv()?.into_bytes())
}

fn next_weekday(d: NaiveDate) -> NaiveDate {
    let mut next = d.succ_opt().expect("date in range");
    while matches!(next.weekday(), Weekday::Sat | Weekday::Sun) {
        next = next.succ_opt().expect("date in range");
    }
    next
}

pub fn simulate(config: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let r = load_config(config)?;
    if !matches!(r.data, DataSource::Simulate { .. }) {
        return Err(CliError::Config("simulate needs [data] source = \"simulate\"".into()));
    }
    let panel = load_panel(&r)?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| r.output_dir.join("panel.csv"));
    write_atomic(&path, write_csv_string(&panel)?.as_bytes())?;
    println!("wrote {} ({} rows, {} assets)", path.display(), panel.n_obs(), panel.n_assets());
    Ok(())
}

fn final_line(kind: ModelKind, f: &FitResult, test_nll: f64) -> String {
    let (a, b) = f.params.persistence_pair();
    format!(
        "final model={kind} a={a:.10} b={b:.10} train_nll={:.10} val_nll={:.10} test_nll={test_nll:.10} epochs_run={} best_epoch={} stop={} jitter_warning={}",
        f.train_nll, f.val_nll, f.epochs_run, f.best_epoch, f.stop_reason, f.jitter_warning
    )
}

pub fn fit(config: &Path, models: &[ModelKind], verbose: bool) -> Result<(), CliError> {
    let r = load_config(config)?;
    let panel = load_panel(&r)?;
    let kinds = if models.is_empty() { r.models.clone() } else { models.to_vec() };
    let hash = panel_hash(&panel);
    let mut staged = Staged::default();
    let mut summary = Table::new([
        "model",
        "a",
        "b",
        "train_nll",
        "val_nll",
        "test_nll",
        "epochs_run",
        "best_epoch",
        "stop_reason",
        "jitter_warning",
    ]);
    for kind in kinds {
        let mut log = String::new();
        let result = fit_with_progress(kind, &panel, &r.train, &r.fit, &mut |stage, rec| {
            let line = format!("stage={stage} {rec}");
            if verbose {
                eprintln!("{line}");
            }
            log.push_str(&line);
            log.push('\n');
        });
        let log_path = r.output_dir.join(format!("{kind}_train.log"));
        let f = match result {
            Ok(f) => f,
            Err(e) => {
                log.push_str(&format!("error: {e}\n"));
                write_atomic(&log_path, log.as_bytes())?;
                return Err(e.into());
            }
        };
        for s in &f.stage_one {
            log.push_str(&format!(
                "stage_one asset={} omega={:.10} alpha={:.10} beta={:.10} unconditional_variance={:.10} epochs_run={} best_epoch={} stop={}\n",
                s.asset,
                s.params.omega,
                s.params.alpha,
                s.params.beta,
                s.params.unconditional_variance(),
                s.epochs_run,
                s.best_epoch,
                s.stop_reason
            ));
        }
        let test = loss_series(kind.as_str(), &f.params, &f.carry, panel.test())?;
        log.push_str(&final_line(kind, &f, test.mean()));
        log.push('\n');
        let (a, b) = f.params.persistence_pair();
        summary.push(vec![
            kind.to_string(),
            num(a),
            num(b),
            num(f.train_nll),
            num(f.val_nll),
            num(test.mean()),
            f.epochs_run.to_string(),
            f.best_epoch.to_string(),
            f.stop_reason.to_string(),
            f.jitter_warning.to_string(),
        ]);
        let ck = Checkpoint {
            params: f.params,
            carry: f.carry,
            config_hash: r.hash,
            panel_hash: hash,
        };
        staged.add(r.output_dir.join(format!("{kind}.ckpt")), ck.to_bytes());
        staged.add(log_path, log);
    }
    staged.add(r.output_dir.join("fit_summary.csv"), csv_bytes(&summary)?);
    staged.add(r.output_dir.join("fit_summary.txt"), summary.to_text());
    staged.commit()?;
    print!("{}", summary.to_text());
    Ok(())
}

pub fn forecast(config: &Path, checkpoint: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let r = load_config(config)?;
    let panel = load_panel(&r)?;
    let ck = load_checkpoint(checkpoint, &panel, &panel_hash(&panel))?;
    let path = ck.params.filter(panel.test(), &ck.carry)?;
    let n = panel.n_assets();
    let mut header = vec!["date".to_string()];
    for i in 0..n {
        for j in i..n {
            header.push(format!("h_{}_{}", i + 1, j + 1));
        }
    }
    let mut table = Table::new(header);
    let dates = &panel.dates()[panel.test_range()];
    let ahead = next_weekday(*panel.dates().last().expect("non-empty panel"));
    let rows = dates.iter().copied().zip(path.h.iter().cloned());
    let last = std::iter::once((ahead, path.carry.covariance()));
    for (date, h) in rows.chain(last) {
        let mut row = vec![date.format("%Y-%m-%d").to_string()];
        for i in 0..n {
            for j in i..n {
                row.push(format!("{:.12}", h.get(i, j)));
            }
        }
        table.push(row);
    }
    let dest = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| r.output_dir.join(format!("forecast_{}.csv", stem(checkpoint))));
    write_atomic(&dest, &csv_bytes(&table)?)?;
    println!("wrote {} ({} forecasts)", dest.display(), table.rows.len());
    Ok(())
}

pub fn backtest(config: &Path, checkpoints: &[PathBuf]) -> Result<(), CliError> {
    let r = load_config(config)?;
    let panel = load_panel(&r)?;
    let hash = panel_hash(&panel);
    let labels = unique_labels(checkpoints);
    let mut results = Vec::with_capacity(checkpoints.len() + 1);
    for (path, label) in checkpoints.iter().zip(&labels) {
        let ck = load_checkpoint(path, &panel, &hash)?;
        let h = ck.params.filter(panel.test(), &ck.carry)?.h;
        results.push(backtest_gmv(label, &h, &panel, &r.levels)?);
    }
    results.push(backtest_equal_weight(&panel));
    let table = backtest_table(&results, panel.n_assets());
    let mut staged = Staged::default();
    staged.add(r.output_dir.join("backtest.csv"), csv_bytes(&table)?);
    staged.add(r.output_dir.join("backtest.txt"), table.to_text());
    staged.add(r.output_dir.join("tail_series.csv"), csv_bytes(&tail_series_table(&results))?);
    staged.commit()?;
    print!("{}", table.to_text());
    Ok(())
}

pub fn compare(config: &Path, checkpoints: &[PathBuf], repeated: bool) -> Result<(), CliError> {
    let r = load_config(config)?;
    if repeated {
        if !checkpoints.is_empty() {
            return Err(CliError::Config("--repeated fits its own models; drop --checkpoint".into()));
        }
        if !r.models.contains(&r.reference) {
            return Err(CliError::Config(format!(
                "reference model {} is not among model.models",
                r.reference
            )));
        }
        let panel = load_panel(&r)?;
        let outcomes = run_repeated(&panel, &r.models, &r.portfolios, &r.train, &r.fit, &r.mcs)?;
        let summary = summarize_repeated(&outcomes, r.reference)?;
        let mut staged = Staged::default();
        staged.add(r.output_dir.join("repeated_summary.csv"), csv_bytes(&summary)?);
        staged.add(r.output_dir.join("repeated_summary.txt"), summary.to_text());
        staged.add(r.output_dir.join("repeated_detail.csv"), csv_bytes(&repeated_detail(&outcomes))?);
        staged.commit()?;
        print!("{}", summary.to_text());
        return Ok(());
    }
    if checkpoints.len() < 2 {
        return Err(CliError::Config("compare needs at least two --checkpoint files (or --repeated)".into()));
    }
    let panel = load_panel(&r)?;
    let loaded = checkpoints
        .iter()
        .map(|p| Checkpoint::load(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display()))))
        .collect::<Result<Vec<_>, _>>()?;
    if loaded.iter().any(|c| c.panel_hash != loaded[0].panel_hash) {
        return Err(CliError::Data("checkpoints were fitted on different panels".into()));
    }
    let hash = panel_hash(&panel);
    let labels = unique_labels(checkpoints);
    let mut series = Vec::with_capacity(loaded.len());
    for ((path, label), _) in checkpoints.iter().zip(&labels).zip(&loaded) {
        let ck = load_checkpoint(path, &panel, &hash)?;
        series.push(loss_series(label, &ck.params, &ck.carry, panel.test())?);
    }
    let reference = loaded.iter().position(|c| c.params.kind() == r.reference).unwrap_or(0);
    let (table, set) = comparison_report(&series, reference, &r.mcs)?;
    if let Some(w) = &set.warning {
        eprintln!("warning: {w}");
    }
    let mut staged = Staged::default();
    staged.add(r.output_dir.join("compare.csv"), csv_bytes(&table)?);
    staged.add(r.output_dir.join("compare.txt"), table.to_text());
    staged.commit()?;
    print!("{}", table.to_text());
    Ok(())
}

pub fn grad_check(models: &[ModelKind], n: usize, t: usize, seed: u64, tol: f64) -> Result<(), CliError> {
    let kinds = if models.is_empty() { ModelKind::ALL.to_vec() } else { models.to_vec() };
    if n == 0 {
        return Err(CliError::Config("n must be positive".into()));
    }
    let mut cov = Matrix::identity(n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                cov.set(i, j, 0.3);
            }
        }
    }
    let rows = t.max(deepbekk::data::MIN_ROWS);
    let panel = data::simulate(&SimulationSpec {
        dgp: Dgp::IidGaussian { cov },
        t: rows,
        seed,
    })?;
    let returns = &panel.values().as_slice()[..t * n];
    let mut table = Table::new(["model", "max_rel_error", "checked", "total", "worst_index", "pass"]);
    let mut failed = Vec::new();
    for kind in kinds {
        let rep = check_gradients(kind, returns, n, seed)?;
        let pass = rep.max_rel_error < tol;
        if !pass {
            failed.push(kind.to_string());
        }
        table.push(vec![
            kind.to_string(),
            format!("{:.3e}", rep.max_rel_error),
            rep.checked.to_string(),
            rep.total.to_string(),
            rep.worst_index.map(|i| i.to_string()).unwrap_or_default(),
            pass.to_string(),
        ]);
    }
    print!("{}", table.to_text());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("gradient check above {tol:e} for {}", failed.join(", "))))
    }
}

#[allow(clippy::too_many_arguments)]
pub fn theorem_check(
    n: usize,
    k: usize,
    paths: usize,
    seed: u64,
    a_grid: &[f64],
    b_grid: &[f64],
    projection_scale: f64,
    out: Option<&Path>,
) -> Result<(), CliError> {
    if n == 0 {
        return Err(CliError::Config("n must be positive".into()));
    }
    let mut s = Matrix::identity(n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s.set(i, j, 0.3);
            }
        }
    }
    let c = cholesky(&s.scale(0.1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut lstm = LstmWeights::xavier(n, 3, &mut rng)?;
    lstm.proj_w.as_mut_slice().iter_mut().for_each(|x| *x *= projection_scale);
    let mut table = Table::new([
        "a",
        "b",
        "lhs",
        "geometric_weight",
        "m",
        "h0_norm",
        "bound",
        "holds",
    ]);
    let mut all = true;
    for &a in a_grid {
        for &b in b_grid {
            if a + b >= 1.0 {
                // outside the stationary region the bound is not defined
                table.push(vec![
                    a.to_string(),
                    b.to_string(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    "not_stationary".into(),
                ]);
                continue;
            }
            let params = LstmBekkParams::new(c.clone(), a, b, lstm.clone())?;
            let rep = check_theorem_bound(&params, paths, k, seed)?;
            let s_k = rep.persistence.powi(k as i32);
            let bound = rep.geometric_weight() * rep.m + s_k * rep.h0_norm * rep.tolerance_factor();
            let holds = rep.holds_strict();
            all &= holds;
            table.push(vec![
                a.to_string(),
                b.to_string(),
                num(rep.lhs),
                num(rep.geometric_weight()),
                num(rep.m),
                num(rep.h0_norm),
                num(bound),
                holds.to_string(),
            ]);
        }
    }
    if let Some(path) = out {
        write_atomic(path, &csv_bytes(&table)?)?;
    }
    print!("{}", table.to_text());
    if all {
        Ok(())
    } else {
        Err(CliError::Numeric("expected-norm bound violated".into()))
    }
}
