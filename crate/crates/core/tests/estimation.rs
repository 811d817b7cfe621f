use deepbekk::data::{simulate, Dgp, ReturnsPanel, SimulationSpec};
use deepbekk::estimation::transform::{bekk_from_free, garch_from_free, lstm_bekk_from_free};
use deepbekk::estimation::{fit, grad_check, FitOptions, FitResult, LstmInit, TrainConfig};
use deepbekk::garch::ScalarBekkParams;
use deepbekk::linalg::{cholesky, Matrix};
use deepbekk::lstm::LstmWeights;
use deepbekk::{ModelKind, ModelParams};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn recovery_panel(seed: u64) -> ReturnsPanel {
    let sigma = Matrix::from_rows(&[vec![1.0, 0.3, 0.2], vec![0.3, 1.5, 0.25], vec![0.2, 0.25, 0.8]]).unwrap();
    let truth = ScalarBekkParams::new(cholesky(&sigma.scale(0.05)).unwrap(), 0.05, 0.90).unwrap();
    simulate(&SimulationSpec {
        dgp: Dgp::ScalarBekk(truth),
        t: 2000,
        seed,
    })
    .unwrap()
}

fn recovery_config() -> TrainConfig {
    TrainConfig {
        max_epochs: 1000,
        patience: 50,
        ..Default::default()
    }
}

fn bits(f: &FitResult) -> Vec<u64> {
    let mut out: Vec<u64> = f.history.iter().flat_map(|r| [r.train_nll.to_bits(), r.val_nll.to_bits()]).collect();
    out.extend([f.train_nll.to_bits(), f.val_nll.to_bits()]);
    out.extend(f.carry.covariance().as_slice().iter().map(|x| x.to_bits()));
    out
}

#[test]
fn gradients_match_finite_differences() {
    for kind in ModelKind::ALL {
        for n in 1..=3 {
            for seed in 0..5u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
                let r: Vec<f64> = (0..20 * n).map(|_| rng.random_range(-2.0..2.0)).collect();
                let rep = grad_check(kind, &r, n, seed).unwrap();
                assert!(rep.max_rel_error < 1e-4, "{kind} n={n} seed={seed}: {rep:?}");
                assert!(rep.checked > 0);
            }
        }
    }
}

#[test]
fn grad_check_rejects_large_fixtures() {
    assert!(grad_check(ModelKind::ScalarBekk, &vec![0.1; 4 * 20], 4, 0).is_err());
    assert!(grad_check(ModelKind::ScalarBekk, &vec![0.1; 2 * 21], 2, 0).is_err());
}

#[test]
fn scalar_bekk_recovers_persistence() {
    let panel = recovery_panel(0);
    let f = fit(ModelKind::ScalarBekk, &panel, &recovery_config(), &FitOptions::default()).unwrap();
    let (a, b) = f.params.persistence_pair();
    assert!((a - 0.05).abs() <= 0.05 && (b - 0.90).abs() <= 0.05, "a={a} b={b}");

    // smoke property: training NLL falls in most epochs
    let falls = f.history.windows(2).filter(|w| w[1].train_nll <= w[0].train_nll).count();
    assert!(falls as f64 >= 0.9 * (f.history.len() - 1) as f64, "{falls} of {}", f.history.len() - 1);
}

#[test]
fn dcc_first_stage_recovers_variance() {
    let panel = simulate(&SimulationSpec {
        dgp: Dgp::IidGaussian {
            cov: Matrix::from_diag(&[2.0, 2.0]),
        },
        t: 5000,
        seed: 1,
    })
    .unwrap();
    let f = fit(ModelKind::Dcc, &panel, &recovery_config(), &FitOptions::default()).unwrap();
    assert_eq!(f.stage_one.len(), 2);
    for s in &f.stage_one {
        let v = s.params.unconditional_variance();
        assert!((1.8..=2.2).contains(&v), "{}: {v}", s.asset);
    }
    let ModelParams::Dcc(p) = &f.params else { panic!("not a DCC fit") };
    for i in 0..2 {
        assert!((p.s.get(i, i) - 1.0).abs() < 1e-10);
    }
}

fn small_panel() -> ReturnsPanel {
    recovery_panel(3).select_columns(&[0, 1]).unwrap()
}

#[test]
fn fits_are_deterministic_and_return_best_validation() {
    let cfg = TrainConfig {
        max_epochs: 40,
        seed: 5,
        ..Default::default()
    };
    let panel = small_panel();
    for kind in ModelKind::ALL {
        let a = fit(kind, &panel, &cfg, &FitOptions::default()).unwrap();
        let b = fit(kind, &panel, &cfg, &FitOptions::default()).unwrap();
        assert_eq!(bits(&a), bits(&b), "{kind}");
        assert_eq!(a.params, b.params);
        assert_eq!(a.history.len(), a.epochs_run);
        assert_eq!(a.history[a.best_epoch - 1].val_nll, a.val_nll, "{kind}");
        assert!(a.val_nll.is_finite());
        let best = a.history.iter().map(|r| r.val_nll).fold(f64::INFINITY, f64::min);
        assert_eq!(best, a.val_nll, "{kind}");
    }
}

#[test]
fn frozen_zero_lstm_matches_scalar_bekk() {
    let panel = small_panel();
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        max_epochs: 150,
        patience: 20,
        ..Default::default()
    };
    let bekk = fit(ModelKind::ScalarBekk, &panel, &cfg, &FitOptions::default()).unwrap();
    let opts = FitOptions {
        lstm_init: LstmInit::Zero,
        freeze_lstm: true,
        dropout: 0.0,
        ..Default::default()
    };
    let nested = fit(ModelKind::LstmBekk, &panel, &cfg, &opts).unwrap();
    let (a0, b0) = bekk.params.persistence_pair();
    let (a1, b1) = nested.params.persistence_pair();
    assert!((a0 - a1).abs() <= 1e-6 && (b0 - b1).abs() <= 1e-6, "({a0}, {b0}) vs ({a1}, {b1})");
    assert!((bekk.train_nll - nested.train_nll).abs() <= 1e-6);
    assert!((bekk.val_nll - nested.val_nll).abs() <= 1e-6);
}

#[test]
fn invalid_settings_rejected() {
    let panel = small_panel();
    let bad = TrainConfig {
        patience: 0,
        ..Default::default()
    };
    assert!(fit(ModelKind::ScalarBekk, &panel, &bad, &FitOptions::default()).is_err());
    let opts = FitOptions {
        layers: 2,
        ..Default::default()
    };
    assert!(fit(ModelKind::LstmBekk, &panel, &TrainConfig::default(), &opts).is_err());
}

proptest! {
    #[test]
    fn free_parameters_always_feasible(theta in prop::collection::vec(-30.0f64..30.0, 8)) {
        let p = bekk_from_free(&theta[..5], 2).unwrap();
        prop_assert!(p.validate().is_ok());
        let g = garch_from_free(&theta[..3]).unwrap();
        prop_assert!(g.validate().is_ok());
    }

    #[test]
    fn lstm_free_parameters_feasible(head in prop::collection::vec(-30.0f64..30.0, 5), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let template = LstmWeights::xavier(2, 3, &mut rng).unwrap();
        let mut theta = head;
        theta.extend((0..template.num_params()).map(|_| rng.random_range(-10.0..10.0)));
        let p = lstm_bekk_from_free(&theta, &template).unwrap();
        prop_assert!(p.validate().is_ok());
    }
}
