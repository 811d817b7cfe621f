use std::io::Write;

use deepbekk::data::{
    business_days, load_csv, random_subpanel, simulate, write_csv, Dgp, ReturnsPanel, SimulationSpec, Splits, ValueKind,
};
use deepbekk::garch::ScalarBekkParams;
use deepbekk::linalg::{cholesky, Matrix};
use deepbekk::Error;
use proptest::prelude::*;

fn second_moment(panel: &ReturnsPanel) -> Matrix {
    let n = panel.n_assets();
    let mut s = Matrix::zeros(n, n);
    for t in 0..panel.n_obs() {
        let r = panel.row(t);
        for i in 0..n {
            for j in 0..n {
                s.set(i, j, s.get(i, j) + r[i] * r[j]);
            }
        }
    }
    s.scale(1.0 / panel.n_obs() as f64)
}

fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn iid_sample_covariance_converges() {
    let panel = simulate(&SimulationSpec {
        dgp: Dgp::IidGaussian { cov: Matrix::identity(2) },
        t: 100_000,
        seed: 11,
    })
    .unwrap();
    assert!(max_abs_diff(&second_moment(&panel), &Matrix::identity(2)) < 0.02);
}

#[test]
fn static_bekk_simulates_constant_covariance() {
    let cc = Matrix::from_rows(&[vec![2.0, 0.6, 0.0], vec![0.6, 1.0, -0.3], vec![0.0, -0.3, 0.5]]).unwrap();
    let p = ScalarBekkParams::new(cholesky(&cc).unwrap(), 0.0, 0.0).unwrap();
    let panel = simulate(&SimulationSpec {
        dgp: Dgp::ScalarBekk(p),
        t: 100_000,
        seed: 5,
    })
    .unwrap();
    let tol = 0.02 * cc.as_slice().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    assert!(max_abs_diff(&second_moment(&panel), &cc) < tol);
}

#[test]
fn simulation_is_deterministic() {
    let spec = SimulationSpec {
        dgp: Dgp::IidGaussian { cov: Matrix::identity(3) },
        t: 500,
        seed: 99,
    };
    let a = simulate(&spec).unwrap();
    let b = simulate(&spec).unwrap();
    let bits = |p: &ReturnsPanel| p.values().as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    let other = simulate(&SimulationSpec { seed: 100, ..spec }).unwrap();
    assert_ne!(bits(&a), bits(&other));
}

#[test]
fn nonstationary_dgp_rejected() {
    let p = ScalarBekkParams {
        c: cholesky(&Matrix::identity(2)).unwrap(),
        a: 0.2,
        b: 0.85,
    };
    let err = simulate(&SimulationSpec {
        dgp: Dgp::ScalarBekk(p),
        t: 100,
        seed: 0,
    })
    .unwrap_err();
    assert!(matches!(err, Error::Constraint(_)), "{err}");
}

fn iid_panel(n: usize, t: usize, seed: u64) -> ReturnsPanel {
    simulate(&SimulationSpec {
        dgp: Dgp::IidGaussian { cov: Matrix::identity(n) },
        t,
        seed,
    })
    .unwrap()
}

#[test]
fn subpanel_selection() {
    let panel = iid_panel(6, 60, 1);
    let full = random_subpanel(&panel, 6, 3).unwrap();
    let mut names = full.assets().to_vec();
    names.sort();
    assert_eq!(names, panel.assets());
    let one = random_subpanel(&panel, 1, 3).unwrap();
    assert_eq!((one.n_assets(), one.n_obs()), (1, 60));
    assert_eq!(one.splits(), panel.splits());
    assert_eq!(one.dates(), panel.dates());
    assert_eq!(random_subpanel(&panel, 4, 8).unwrap(), random_subpanel(&panel, 4, 8).unwrap());
    assert!(matches!(random_subpanel(&panel, 7, 0), Err(Error::Argument(_))));
}

#[test]
fn csv_round_trip() {
    let panel = iid_panel(3, 200, 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("panel.csv");
    write_csv(&panel, &path).unwrap();
    let back = load_csv(&path, ValueKind::Returns, Some(panel.splits())).unwrap();
    assert_eq!(back.dates(), panel.dates());
    assert_eq!(back.assets(), panel.assets());
    let err = max_abs_diff(back.values(), panel.values());
    assert!(err <= 1e-12, "round-trip error {err}");
}

fn write_file(dir: &tempfile::TempDir, body: &str) -> std::path::PathBuf {
    let path = dir.path().join("in.csv");
    let mut f = std::fs::File::create(&path).unwrap();
    f.write_all(body.as_bytes()).unwrap();
    path
}

fn returns_body(rows: usize) -> String {
    let mut s = String::from("date,x,y\n");
    for (i, d) in business_days(rows).iter().enumerate() {
        s.push_str(&format!("{d},{},{}\n", i as f64 * 0.1, 1.0 - i as f64 * 0.05));
    }
    s
}

#[test]
fn ingestion_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut body = returns_body(12);
    body = body.replacen(",0.2,", ",,", 1);
    match load_csv(&write_file(&dir, &body), ValueKind::Returns, None).unwrap_err() {
        Error::Ingestion { row, column, .. } => assert_eq!((row, column.as_str()), (4, "x")),
        e => panic!("unexpected {e}"),
    }

    let swapped = "date,x\n2020-01-02,1\n2020-01-01,2\n";
    assert!(matches!(
        load_csv(&write_file(&dir, swapped), ValueKind::Returns, None).unwrap_err(),
        Error::Ordering { .. }
    ));

    assert!(matches!(
        load_csv(&write_file(&dir, &returns_body(9)), ValueKind::Returns, None).unwrap_err(),
        Error::InsufficientData { .. }
    ));

    let negative = "date,x\n2020-01-01,1\n2020-01-02,-1\n";
    assert!(load_csv(&write_file(&dir, negative), ValueKind::Prices, None).is_err());
}

#[test]
fn default_split_on_load() {
    let dir = tempfile::tempdir().unwrap();
    let panel = load_csv(&write_file(&dir, &returns_body(1000)), ValueKind::Returns, None).unwrap();
    assert_eq!(panel.splits(), Splits { train_end: 700, val_end: 850 });
    let train_mean: f64 = (0..700).map(|t| panel.row(t)[0]).sum::<f64>() / 700.0;
    assert!(train_mean.abs() < 1e-10);
}

#[test]
fn prices_become_percent_log_returns() {
    let dir = tempfile::tempdir().unwrap();
    let mut body = String::from("date,x\n");
    for (i, d) in business_days(12).iter().enumerate() {
        body.push_str(&format!("{d},{}\n", 100.0 * 1.01f64.powi(i as i32)));
    }
    let panel = load_csv(&write_file(&dir, &body), ValueKind::Prices, None).unwrap();
    assert_eq!(panel.n_obs(), 11);
    // constant growth demeans to zero everywhere
    assert!(panel.values().as_slice().iter().all(|v| v.abs() < 1e-10));
    assert!((panel.train_means()[0] - 100.0 * 1.01f64.ln()).abs() < 1e-10);
}

proptest! {
    #[test]
    fn demeaning_has_no_lookahead(
        raw in prop::collection::vec(-10.0f64..10.0, 40),
        shift in prop::collection::vec(-100.0f64..100.0, 2),
    ) {
        let dates = business_days(20);
        let assets = vec!["a".to_string(), "b".to_string()];
        let splits = Splits { train_end: 12, val_end: 16 };
        let base = ReturnsPanel::new(dates.clone(), assets.clone(), Matrix::from_vec(20, 2, raw.clone()).unwrap(), Some(splits)).unwrap();
        let mut moved = raw;
        for t in 12..20 {
            moved[2 * t] += shift[0];
            moved[2 * t + 1] += shift[1];
        }
        let other = ReturnsPanel::new(dates, assets, Matrix::from_vec(20, 2, moved).unwrap(), Some(splits)).unwrap();
        prop_assert_eq!(base.train_means(), other.train_means());
        prop_assert_eq!(base.train(), other.train());
    }
}
