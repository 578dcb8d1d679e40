use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use srctrace::linalg::{estimate_moments, psd_sqrt, sym_eig, Matrix, MeanCov};
use srctrace::metrics::frechet_distance;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// `AᵀA` for a random `rank × d` matrix `A`.
fn random_psd(d: usize, rank: usize, seed: u64) -> Matrix {
    let a = random_matrix(rank, d, seed);
    let mut s = a.transpose().matmul(&a).unwrap();
    s.symmetrize();
    s
}

fn dims() -> impl Strategy<Value = usize> {
    prop::sample::select(vec![1usize, 2, 16, 144])
}

fn rel_frobenius(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(f64::MIN_POSITIVE)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn psd_sqrt_squares_back(d in dims(), extra in 0usize..4, deficient in any::<bool>(), seed in any::<u64>()) {
        let rank = if deficient { (d / 2).max(1) } else { d + extra };
        let s = random_psd(d, rank, seed);
        let r = psd_sqrt(&s).unwrap();
        prop_assert!(rel_frobenius(&r.matmul(&r).unwrap(), &s) < 1e-8);
        prop_assert_eq!(r.asymmetry(), 0.0);
    }

    #[test]
    fn eigen_reconstruction(d in dims(), seed in any::<u64>()) {
        let mut s = random_matrix(d, d, seed);
        s = s.add(&s.transpose()).unwrap();
        let eig = sym_eig(&s).unwrap();
        let v = &eig.vectors;
        let rebuilt = v.matmul(&Matrix::from_diag(&eig.values)).unwrap().matmul(&v.transpose()).unwrap();
        prop_assert!(rel_frobenius(&rebuilt, &s) < 1e-8);
        let gram = v.transpose().matmul(v).unwrap();
        prop_assert!(gram.sub(&Matrix::identity(d)).unwrap().max_abs() < 1e-8);
        prop_assert!(eig.values.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn moments_ignore_row_order(n in 2usize..40, d in 1usize..12, seed in any::<u64>(), shift in -1e3f64..1e3) {
        let x = random_matrix(n, d, seed);
        let x = Matrix::from_vec(n, d, x.as_slice().iter().map(|v| v + shift).collect()).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        order.reverse();
        order.rotate_left(seed as usize % n);
        let mut permuted = Matrix::zeros(n, d);
        for (dst, &src) in order.iter().enumerate() {
            permuted.row_mut(dst).copy_from_slice(x.row(src));
        }
        let a = estimate_moments(&x).unwrap();
        let b = estimate_moments(&permuted).unwrap();
        for (u, v) in a.mean.iter().zip(&b.mean) {
            prop_assert!((u - v).abs() <= 1e-10 * u.abs().max(1.0));
        }
        prop_assert!(rel_frobenius(&a.cov, &b.cov) <= 1e-10);
        prop_assert_eq!(a.cov.asymmetry(), 0.0);
        prop_assert_eq!(b.cov.asymmetry(), 0.0);
    }

    #[test]
    fn frechet_zero_on_self_and_symmetric(d in 1usize..20, seed in any::<u64>()) {
        let mk = |s: u64| {
            let x = random_matrix(d + 10, d, s);
            estimate_moments(&x).unwrap()
        };
        let a = mk(seed);
        let b = mk(seed.wrapping_add(1));
        let scale = a.cov.trace() + b.cov.trace();
        prop_assert!(frechet_distance(&a, &a).unwrap().abs() <= 1e-8 * scale.max(1.0));
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-8 * ab.max(1.0));
    }

    #[test]
    fn frechet_matches_diagonal_closed_form(
        d in 1usize..30,
        mu in prop::collection::vec(-5.0f64..5.0, 60),
        var in prop::collection::vec(0.001f64..20.0, 60),
    ) {
        let a = MeanCov::new(mu[..d].to_vec(), Matrix::from_diag(&var[..d]), 10).unwrap();
        let b = MeanCov::new(mu[30..30 + d].to_vec(), Matrix::from_diag(&var[30..30 + d]), 10).unwrap();
        let expected: f64 = (0..d)
            .map(|i| (mu[i] - mu[30 + i]).powi(2) + (var[i].sqrt() - var[30 + i].sqrt()).powi(2))
            .sum();
        let got = frechet_distance(&a, &b).unwrap();
        prop_assert!((got - expected).abs() <= 1e-8 * expected.max(1e-300), "{} vs {}", got, expected);
    }
}

#[test]
fn rejects_indefinite_input() {
    let s = Matrix::from_rows(&[[1.0, 0.0], [0.0, -1.0]]).unwrap();
    assert!(matches!(psd_sqrt(&s), Err(srctrace::Error::NotPsd(_))));
}
