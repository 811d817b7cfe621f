use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use deepbekk::data::{load_csv, ValueKind};
use deepbekk::estimation::{fit, FitOptions, TrainConfig};
use deepbekk::ModelKind;
use tempfile::TempDir;

fn deepbekk(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deepbekk"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

const SMALL: &str = r#"
seed = 3
output_dir = "out"

[data]
source = "simulate"
dgp = "dcc"
n = 3
t = 300

[train]
max_epochs = 20

[evaluation]
bootstrap_resamples = 200
portfolio_count = 2
portfolio_size = 2
"#;

fn listing(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .map(|it| {
            it.map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
            })
            .collect()
        })
        .unwrap_or_default();
    out.sort();
    out
}

/// Runs the full pipeline in a fresh directory and returns every output file.
fn pipeline() -> Vec<(String, Vec<u8>)> {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    write_config(d, "c.toml", SMALL);
    ok(&deepbekk(d, &["simulate", "--config", "c.toml"]));
    ok(&deepbekk(d, &["fit", "--config", "c.toml"]));
    ok(&deepbekk(d, &["forecast", "--config", "c.toml", "--checkpoint", "out/lstm_bekk.ckpt"]));
    let cks = ["out/scalar_bekk.ckpt", "out/dcc.ckpt", "out/lstm_bekk.ckpt"];
    let mut args = vec!["backtest", "--config", "c.toml"];
    cks.iter().for_each(|c| args.extend(["--checkpoint", c]));
    ok(&deepbekk(d, &args));
    args[0] = "compare";
    ok(&deepbekk(d, &args));
    ok(&deepbekk(d, &["compare", "--config", "c.toml", "--repeated"]));
    let gc = ok(&deepbekk(d, &["grad-check", "--n", "2"]));
    fs::write(d.join("out/grad_check.txt"), gc).unwrap();
    ok(&deepbekk(d, &["theorem-check", "--paths", "200", "--out", "out/theorem.csv"]));
    listing(&d.join("out"))
}

#[test]
fn pipeline_outputs_are_byte_identical_across_runs() {
    let a = pipeline();
    let b = pipeline();
    assert!(a.len() >= 15, "{:?}", a.iter().map(|f| &f.0).collect::<Vec<_>>());
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.0, y.0);
        assert!(x.1 == y.1, "{} differs between runs", x.0);
    }
}

#[test]
fn invalid_config_exits_2_without_output() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let bad = SMALL.replace("max_epochs = 20", "max_epochs = 20\nlearning_rate = -1.0");
    write_config(d, "c.toml", &bad);
    let out = deepbekk(d, &["fit", "--config", "c.toml"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));
    assert!(!d.join("out").exists());

    write_config(d, "u.toml", &SMALL.replace("seed = 3", "seed = 3\nbogus = 1"));
    let out = deepbekk(d, &["simulate", "--config", "u.toml"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(!d.join("out").exists());
}

#[test]
fn missing_csv_exits_3_naming_the_path() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    write_config(
        d,
        "c.toml",
        "output_dir = \"out\"\n[data]\nsource = \"csv\"\npath = \"nowhere/returns.csv\"\n",
    );
    let out = deepbekk(d, &["fit", "--config", "c.toml"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("nowhere/returns.csv"), "{}", stderr(&out));
    assert!(!d.join("out").exists());
}

#[test]
fn non_stationary_simulation_rejected() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    write_config(
        d,
        "c.toml",
        "output_dir = \"out\"\n[data]\nsource = \"simulate\"\ndgp = \"scalar_bekk\"\nn = 2\nt = 100\na = 0.2\nb = 0.85\n",
    );
    let out = deepbekk(d, &["simulate", "--config", "c.toml"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("a + b"), "{}", stderr(&out));
    assert!(!d.join("out").exists());
}

#[test]
fn iid_panel_has_date_and_asset_columns() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    write_config(
        d,
        "c.toml",
        "output_dir = \"out\"\n[data]\nsource = \"simulate\"\ndgp = \"iid\"\nn = 2\nt = 50\n",
    );
    ok(&deepbekk(d, &["simulate", "--config", "c.toml"]));
    let text = fs::read_to_string(d.join("out/panel.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 3);
    assert_eq!(lines.count(), 50);
}

#[test]
fn forecast_from_checkpoint_matches_in_process_fit() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    write_config(d, "sim.toml", SMALL);
    ok(&deepbekk(d, &["simulate", "--config", "sim.toml", "--out", "panel.csv"]));
    write_config(
        d,
        "c.toml",
        "seed = 3\noutput_dir = \"out\"\n[data]\nsource = \"csv\"\npath = \"panel.csv\"\n[model]\nmodels = [\"scalar_bekk\"]\n[train]\nmax_epochs = 20\n",
    );
    ok(&deepbekk(d, &["fit", "--config", "c.toml"]));
    ok(&deepbekk(d, &["forecast", "--config", "c.toml", "--checkpoint", "out/scalar_bekk.ckpt"]));

    let panel = load_csv(&d.join("panel.csv"), ValueKind::Returns, None).unwrap();
    let cfg = TrainConfig {
        max_epochs: 20,
        seed: 3,
        ..Default::default()
    };
    let f = fit(ModelKind::ScalarBekk, &panel, &cfg, &FitOptions::default()).unwrap();
    let path = f.params.filter(panel.test(), &f.carry).unwrap();
    let mut expected: Vec<_> = path.h.clone();
    expected.push(path.carry.covariance());

    let text = fs::read_to_string(d.join("out/forecast_scalar_bekk.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), panel.test_range().len() + 1);
    for (row, h) in rows.iter().zip(&expected) {
        let cells: Vec<f64> = row.split(',').skip(1).map(|c| c.parse().unwrap()).collect();
        let mut k = 0;
        for i in 0..3 {
            for j in i..3 {
                assert!((cells[k] - h.get(i, j)).abs() <= 1e-11 * (1.0 + h.get(i, j).abs()));
                k += 1;
            }
        }
    }
}

#[test]
fn checkpoint_compared_with_itself_is_indistinguishable() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    write_config(d, "c.toml", &SMALL.replace("[train]", "[model]\nmodels = [\"scalar_bekk\"]\n[train]"));
    ok(&deepbekk(d, &["fit", "--config", "c.toml"]));
    let stdout = ok(&deepbekk(
        d,
        &["compare", "--config", "c.toml", "--checkpoint", "out/scalar_bekk.ckpt", "--checkpoint", "out/scalar_bekk.ckpt"],
    ));
    let csv = fs::read_to_string(d.join("out/compare.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2, "{stdout}");
    let t_row = rows.iter().find(|r| !r[3].is_empty()).expect("one non-reference row");
    assert_eq!(t_row[3].parse::<f64>().unwrap(), 0.0);
    assert_eq!(t_row[4].parse::<f64>().unwrap(), 1.0);
    for r in &rows {
        assert_eq!(r[5].parse::<f64>().unwrap(), 1.0);
        assert_eq!(r[6], "true");
    }
}

#[test]
fn three_checkpoints_give_three_rows_and_mismatched_panels_fail() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    write_config(d, "c.toml", SMALL);
    ok(&deepbekk(d, &["fit", "--config", "c.toml"]));
    let cks = ["out/scalar_bekk.ckpt", "out/dcc.ckpt", "out/lstm_bekk.ckpt"];
    let mut args = vec!["compare", "--config", "c.toml"];
    cks.iter().for_each(|c| args.extend(["--checkpoint", c]));
    ok(&deepbekk(d, &args));
    let csv = fs::read_to_string(d.join("out/compare.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    write_config(d, "other.toml", &SMALL.replace("seed = 3", "seed = 4").replace("\"out\"", "\"out2\""));
    ok(&deepbekk(d, &["fit", "--config", "other.toml", "--model", "scalar_bekk"]));
    let out = deepbekk(
        d,
        &["compare", "--config", "c.toml", "--checkpoint", "out/dcc.ckpt", "--checkpoint", "out2/scalar_bekk.ckpt"],
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("different panel"), "{}", stderr(&out));
    let out = deepbekk(d, &["forecast", "--config", "c.toml", "--checkpoint", "out2/scalar_bekk.ckpt"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn recovery_fit_log_reports_persistence_near_truth() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    write_config(
        d,
        "c.toml",
        r#"
seed = 0
output_dir = "out"
[data]
source = "simulate"
dgp = "scalar_bekk"
n = 3
t = 2000
variances = [1.0, 1.5, 0.8]
correlation = 0.25
[model]
models = ["scalar_bekk"]
[train]
max_epochs = 1000
patience = 50
"#,
    );
    ok(&deepbekk(d, &["fit", "--config", "c.toml"]));
    let log = fs::read_to_string(d.join("out/scalar_bekk_train.log")).unwrap();
    let last = log.lines().last().unwrap();
    let field = |key: &str| -> f64 {
        last.split_whitespace()
            .find_map(|kv| kv.strip_prefix(key))
            .unwrap()
            .parse()
            .unwrap()
    };
    assert!(last.starts_with("final model=scalar_bekk"), "{last}");
    assert!((field("a=") - 0.05).abs() <= 0.05, "{last}");
    assert!((field("b=") - 0.90).abs() <= 0.05, "{last}");
}

#[test]
fn dominated_model_leaves_the_confidence_set() {
    // iid data: DCC and scalar BEKK both nest the constant model, while a
    // one-epoch LSTM-BEKK with a large random projection does not fit at all.
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let base = "seed = 5\noutput_dir = \"out\"\n[data]\nsource = \"simulate\"\ndgp = \"scalar_bekk\"\nn = 4\nt = 1500\n[evaluation]\nbootstrap_resamples = 500\n";
    write_config(d, "good.toml", &format!("{base}[model]\nmodels = [\"scalar_bekk\"]\n[train]\nmax_epochs = 200\n"));
    write_config(
        d,
        "bad.toml",
        &format!("{base}[model]\nmodels = [\"lstm_bekk\"]\nprojection_scale = 20.0\nstart = \"fixed\"\nstart_a = 0.3\nstart_b = 0.3\n[train]\nmax_epochs = 1\n"),
    );
    ok(&deepbekk(d, &["fit", "--config", "good.toml"]));
    ok(&deepbekk(d, &["fit", "--config", "bad.toml"]));
    ok(&deepbekk(
        d,
        &["compare", "--config", "good.toml", "--checkpoint", "out/scalar_bekk.ckpt", "--checkpoint", "out/lstm_bekk.ckpt"],
    ));
    let csv = fs::read_to_string(d.join("out/compare.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let row = |m: &str| rows.iter().find(|r| r[0] == m).unwrap().clone();
    assert_eq!(row("scalar_bekk")[6], "true", "{csv}");
    assert_eq!(row("lstm_bekk")[6], "false", "{csv}");
}

#[test]
fn grad_check_and_theorem_check_succeed() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let gc = ok(&deepbekk(d, &["grad-check", "--n", "2", "--t", "20"]));
    assert_eq!(gc.lines().filter(|l| l.trim_end().ends_with("true")).count(), 3, "{gc}");
    let tc = ok(&deepbekk(d, &["theorem-check"]));
    assert_eq!(tc.lines().count(), 10, "{tc}");
    assert!(tc.contains("not_stationary"));
    let out = deepbekk(d, &["grad-check", "--n", "4"]);
    assert!(!out.status.success());
}
