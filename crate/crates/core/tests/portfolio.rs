use deepbekk::data::{simulate, Dgp, SimulationSpec};
use deepbekk::linalg::Matrix;
use deepbekk::portfolio::{
    backtest_equal_weight, backtest_gmv, backtest_table, gaussian_var_es, gmv_weights, joint_al_loss,
    portfolio_variance, quantile_loss, tail_series_table, DEFAULT_LEVELS,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_pd(n: usize, rng: &mut impl Rng) -> Matrix {
    let a = Matrix::from_vec(n, n, (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let mut m = a.matmul(&a.transpose());
    for i in 0..n {
        m.set(i, i, m.get(i, i) + 0.05);
    }
    m
}

#[test]
fn gmv_beats_random_portfolios() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let n = rng.random_range(2..=8);
        let h = random_pd(n, &mut rng);
        let w = gmv_weights(&h).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        let best = portfolio_variance(&w, &h);
        for _ in 0..1000 {
            let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let s: f64 = v.iter().sum();
            if s.abs() < 1e-3 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= s);
            assert!(best <= portfolio_variance(&v, &h) * (1.0 + 1e-12));
        }
    }
    let w = gmv_weights(&Matrix::identity(4)).unwrap();
    assert!(w.iter().all(|x| (x - 0.25).abs() < 1e-12));
}

#[test]
fn gmv_under_true_covariance_is_less_volatile_than_equal_weight() {
    let cov = Matrix::from_diag(&[0.2, 1.0, 3.0, 8.0]);
    let panel = simulate(&SimulationSpec {
        dgp: Dgp::IidGaussian { cov: cov.clone() },
        t: 3000,
        seed: 6,
    })
    .unwrap();
    let forecasts = vec![cov; panel.test_range().len()];
    let gmv = backtest_gmv("truth", &forecasts, &panel, &DEFAULT_LEVELS).unwrap();
    let ew = backtest_equal_weight(&panel);
    assert!(gmv.av <= ew.av, "{} vs {}", gmv.av, ew.av);
    assert!(gmv.mdd <= 0.0 && ew.mdd <= 0.0);
    assert!(ew.tails.is_empty());
    assert_eq!(gmv.tails.len(), 2);
    for tail in &gmv.tails {
        for (v, e) in tail.var.iter().zip(&tail.es) {
            assert!(*e < *v && *v < 0.0);
        }
    }

    let table = backtest_table(&[gmv.clone(), ew], 4);
    assert!(table.rows.iter().all(|r| r[1] == "4"));
    assert_eq!(table.rows.iter().filter(|r| r[0] == "equal_weight").count(), 3);
    let series = tail_series_table(&[gmv]);
    assert_eq!(series.header, ["date", "model", "level", "var", "es", "realized"]);
    assert_eq!(series.rows.len(), 2 * panel.test_range().len());
}

#[test]
fn tail_loss_fixtures() {
    assert!((quantile_loss(-1.0, -2.0, 0.05) - 0.05).abs() < 1e-9);
    assert!((quantile_loss(-1.0, -0.5, 0.05) - 0.475).abs() < 1e-9);
    let joint = joint_al_loss(0.0, -1.5, -2.0, 0.05).unwrap();
    assert!((joint - (-(0.475f64).ln() + 0.75)).abs() < 1e-9);
}

/// Standard-normal draws, sorted, with prefix sums for fast expected losses.
struct Sample {
    sorted: Vec<f64>,
    prefix: Vec<f64>,
}

impl Sample {
    fn new(size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sorted: Vec<f64> = (0..size).map(|_| rng.sample(StandardNormal)).collect();
        sorted.sort_by(f64::total_cmp);
        let mut prefix = vec![0.0];
        for x in &sorted {
            prefix.push(prefix.last().unwrap() + x);
        }
        Self { sorted, prefix }
    }

    /// Mean of `(alpha - 1{r <= q}) (r - q)`.
    fn mean_check(&self, q: f64, alpha: f64) -> f64 {
        let n = self.sorted.len() as f64;
        let k = self.sorted.partition_point(|r| *r <= q);
        let mean_r = self.prefix[self.sorted.len()] / n;
        alpha * (mean_r - q) - (self.prefix[k] - k as f64 * q) / n
    }
}

fn grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let k = ((hi - lo) / step).round() as usize;
    (0..=k).map(|i| lo + step * i as f64).collect()
}

#[test]
fn quantile_loss_minimized_at_empirical_quantile() {
    let sample = Sample::new(200_000, 3);
    let alpha = 0.05;
    let step = 0.01;
    let q_star = grid(-3.0, 0.0, step)
        .into_iter()
        .min_by(|a, b| sample.mean_check(*a, alpha).total_cmp(&sample.mean_check(*b, alpha)))
        .unwrap();
    let empirical = sample.sorted[(alpha * sample.sorted.len() as f64) as usize];
    assert!((q_star - empirical).abs() <= step, "{q_star} vs {empirical}");
    // direct evaluation agrees with the prefix-sum shortcut
    let direct: f64 = sample.sorted.iter().map(|r| quantile_loss(*r, -1.6, alpha)).sum::<f64>() / 200_000.0;
    assert!((direct - sample.mean_check(-1.6, alpha)).abs() < 1e-9);
}

#[test]
fn joint_loss_minimized_at_gaussian_pair() {
    let sample = Sample::new(1_000_000, 8);
    let step = 0.01;
    for alpha in DEFAULT_LEVELS {
        let (var, es) = gaussian_var_es(1.0, alpha);
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for q in grid(var - 0.5, var + 0.5, step) {
            let check = sample.mean_check(q, alpha);
            for e in grid(es - 0.5, es + 0.5, step) {
                let loss = -((alpha - 1.0) / e).ln() - check / (alpha * e);
                if loss < best.0 {
                    best = (loss, q, e);
                }
            }
        }
        assert!((best.1 - var).abs() <= step, "alpha {alpha}: VaR {} vs {var}", best.1);
        assert!((best.2 - es).abs() <= step, "alpha {alpha}: ES {} vs {es}", best.2);
    }
}

proptest! {
    #[test]
    fn gmv_scale_invariant(seed in any::<u64>(), n in 1usize..=6, c in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = random_pd(n, &mut rng);
        let w = gmv_weights(&h).unwrap();
        let wc = gmv_weights(&h.scale(c)).unwrap();
        for (x, y) in w.iter().zip(&wc) {
            prop_assert!((x - y).abs() <= 1e-10 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn gaussian_es_below_var_below_zero(sigma in 1e-4f64..1e3) {
        for alpha in DEFAULT_LEVELS {
            let (v, e) = gaussian_var_es(sigma, alpha);
            prop_assert!(e < v && v < 0.0);
        }
    }
}
