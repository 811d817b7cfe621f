use deepbekk::linalg::{cholesky, frobenius_norm, logdet_and_quadform, LowerTriangular, Matrix, SpdMatrix};
use proptest::prelude::*;

/// Cyclic Jacobi rotations; slow but simple enough to trust.
fn jacobi_eigenvalues(m: &Matrix) -> Vec<f64> {
    let n = m.rows();
    let mut a = m.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.get(i, j).powi(2))
            .sum();
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
            }
        }
    }
    a.diag()
}

fn random_spd(n: usize, entries: &[f64]) -> Matrix {
    let a = Matrix::from_vec(n, n, entries[..n * n].to_vec()).unwrap();
    let mut m = a.matmul(&a.transpose());
    for i in 0..n {
        m.set(i, i, m.get(i, i) + n as f64);
    }
    m
}

fn spd_strategy() -> impl Strategy<Value = Matrix> {
    (1usize..=8).prop_flat_map(|n| prop::collection::vec(-2.0f64..2.0, n * n).prop_map(move |v| random_spd(n, &v)))
}

#[test]
fn jacobi_oracle_on_known_spectrum() {
    let m = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
    let mut ev = jacobi_eigenvalues(&m);
    ev.sort_by(f64::total_cmp);
    assert!((ev[0] - 1.0).abs() < 1e-12 && (ev[1] - 3.0).abs() < 1e-12);
}

#[test]
fn cholesky_reports_pivot_on_indefinite() {
    let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
    let err = cholesky(&m).unwrap_err();
    assert!(matches!(err, deepbekk::Error::NotPositiveDefinite { .. }), "{err}");
}

proptest! {
    #[test]
    fn logdet_matches_eigenvalues(m in spd_strategy()) {
        let spd = SpdMatrix::new(m.clone()).unwrap();
        let (logdet, _) = logdet_and_quadform(&spd, &vec![0.0; m.rows()]).unwrap();
        let oracle: f64 = jacobi_eigenvalues(&m).iter().map(|x| x.ln()).sum();
        prop_assert!((logdet - oracle).abs() < 1e-8, "{logdet} vs {oracle}");
    }

    #[test]
    fn factor_reconstructs(m in spd_strategy()) {
        let l = cholesky(&m).unwrap();
        let mut diff = l.outer();
        diff.add_scaled(-1.0, &m);
        prop_assert!(frobenius_norm(&diff) <= 1e-10 * frobenius_norm(&m));
        prop_assert!(l.diag().iter().all(|d| *d > 0.0));
    }

    #[test]
    fn quadform_nonnegative((m, r) in spd_strategy().prop_flat_map(|m| {
        let n = m.rows();
        (Just(m), prop::collection::vec(-5.0f64..5.0, n))
    })) {
        let spd = SpdMatrix::new(m).unwrap();
        let (_, quad) = logdet_and_quadform(&spd, &r).unwrap();
        if r.iter().all(|x| *x == 0.0) {
            prop_assert_eq!(quad, 0.0);
        } else {
            prop_assert!(quad > 0.0);
        }
    }

    #[test]
    fn cholesky_is_deterministic(m in spd_strategy()) {
        let a = cholesky(&m).unwrap();
        let b = cholesky(&m.clone()).unwrap();
        prop_assert_eq!(
            a.packed().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.packed().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn pack_unpack_exact(v in (1usize..=6).prop_flat_map(|n| prop::collection::vec(-1e3f64..1e3, n * (n + 1) / 2))) {
        let l = LowerTriangular::from_packed(v.clone()).unwrap();
        let back = LowerTriangular::pack(&l.unpack());
        prop_assert_eq!(back.packed(), &v[..]);
    }
}
