use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use srctrace::losses::{
    beta_at, cross_entropy, mixup_pair, npair_loss, oc_softmax_loss, one_hot, regmixup_loss,
    BetaSchedule, MixupConfig, OcSoftmaxParams, Target,
};
use srctrace::trainer::gradcheck::grad_check_vec;

const TOL: f64 = 1e-4;

fn vec_of(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, len)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cross_entropy_gradient(z in vec_of(5), c in 0usize..5) {
        let rep = grad_check_vec(&z, |v| cross_entropy(v, Target::Class(c)), TOL).unwrap();
        prop_assert!(rep.passed, "{:?}", rep);
    }

    #[test]
    fn regmixup_gradient(z in vec_of(8), lambda in 0.0f64..=1.0, ci in 0usize..4, cj in 0usize..4, eta in 0.0f64..2.0) {
        let (_, target) = mixup_pair(&[0.0], &one_hot(ci, 4), &[0.0], &one_hot(cj, 4), lambda).unwrap();
        let rep = grad_check_vec(
            &z,
            |v| {
                let l = regmixup_loss(&v[..4], Target::Class(ci), &v[4..], &target, eta)?;
                Ok((l.loss, [l.grad_clean, l.grad_mix].concat()))
            },
            TOL,
        )
        .unwrap();
        prop_assert!(rep.passed, "{:?}", rep);
    }

    #[test]
    fn oc_softmax_gradients(e in vec_of(6), w in vec_of(6), is_real in any::<bool>()) {
        prop_assume!(dot(&e, &e) > 1e-2 && dot(&w, &w) > 1e-2);
        let params = OcSoftmaxParams::new(20.0, 0.9, 0.2, w.clone()).unwrap();
        let rep = grad_check_vec(&e, |v| oc_softmax_loss(v, is_real, &params).map(|l| (l.loss, l.grad_embedding)), TOL).unwrap();
        prop_assert!(rep.passed, "{:?}", rep);
        let rep = grad_check_vec(
            &w,
            |v| {
                let p = OcSoftmaxParams { scale: 20.0, m_real: 0.9, m_fake: 0.2, direction: v.to_vec() };
                oc_softmax_loss(&e, is_real, &p).map(|l| (l.loss, l.grad_direction))
            },
            TOL,
        )
        .unwrap();
        prop_assert!(rep.passed, "{:?}", rep);
    }

    #[test]
    fn npair_gradient(v in vec_of(20), beta in 0.01f64..2.0) {
        let d = 4;
        let rep = grad_check_vec(
            &v,
            |x| {
                let negs: Vec<&[f64]> = (2..5).map(|i| &x[i * d..(i + 1) * d]).collect();
                let l = npair_loss(&x[..d], &x[d..2 * d], &negs, beta)?;
                let mut g = [l.grad_anchor, l.grad_positive].concat();
                l.grad_negatives.iter().for_each(|n| g.extend(n));
                Ok((l.loss, g))
            },
            TOL,
        )
        .unwrap();
        prop_assert!(rep.passed, "{:?}", rep);
    }

    #[test]
    fn npair_monotone_in_similarities(anchor in vec_of(4), pos in vec_of(4), neg in vec_of(4), step in 0.1f64..1.0) {
        let na = dot(&anchor, &anchor);
        prop_assume!(na > 0.1);
        let base = npair_loss(&anchor, &pos, &[&neg], 1.0).unwrap().loss;
        prop_assert!(base >= 0.0);
        // moving along the anchor raises the inner product by step·‖a‖²
        let closer: Vec<f64> = pos.iter().zip(&anchor).map(|(p, a)| p + step * a).collect();
        prop_assert!(npair_loss(&anchor, &closer, &[&neg], 1.0).unwrap().loss < base);
        let harder: Vec<f64> = neg.iter().zip(&anchor).map(|(n, a)| n + step * a).collect();
        prop_assert!(npair_loss(&anchor, &pos, &[&harder], 1.0).unwrap().loss > base);
    }

    #[test]
    fn npair_stable_at_large_magnitudes(sign in prop::bool::ANY, scale in 1e3f64..1e4) {
        let s = if sign { scale } else { -scale };
        let l = npair_loss(&[1.0, 0.0], &[0.0, 0.0], &[&[s, 0.0], &[-s, 1.0]], 0.5).unwrap();
        prop_assert!(l.loss.is_finite() && l.loss >= 0.0);
        prop_assert!(l.grad_anchor.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn regmixup_at_unit_lambda(z in vec_of(4), c in 0usize..4, eta in 0.0f64..3.0) {
        let (_, target) = mixup_pair(&[1.0], &one_hot(c, 4), &[2.0], &one_hot((c + 1) % 4, 4), 1.0).unwrap();
        let l = regmixup_loss(&z, Target::Class(c), &z, &target, eta).unwrap();
        let (ce, _) = cross_entropy(&z, Target::Class(c)).unwrap();
        prop_assert!((l.loss - (1.0 + eta) * ce).abs() <= 1e-12);
    }

    #[test]
    fn beta_schedule_shape(warmup in 0usize..40, span in 1usize..40, init in 0.0f64..0.5, extra in 0.0f64..1.0) {
        let s = BetaSchedule { warmup_epochs: warmup, init, final_value: init + extra, final_epoch: warmup + span };
        s.validate().unwrap();
        for e in 1..=warmup {
            prop_assert_eq!(beta_at(e, &s), 0.0);
        }
        prop_assert_eq!(beta_at(s.final_epoch, &s), s.final_value);
        for e in 1..s.final_epoch + 5 {
            prop_assert!(beta_at(e + 1, &s) >= beta_at(e, &s));
            prop_assert!(beta_at(e, &s) >= 0.0);
        }
    }

    #[test]
    fn mixup_weights_in_unit_interval(seed in any::<u64>(), alpha in 0.05f64..20.0) {
        let cfg = MixupConfig { eta: 1.0, alpha };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..50 {
            let l = cfg.sample_lambda(&mut rng);
            prop_assert!((0.0..=1.0).contains(&l));
        }
    }

    #[test]
    fn oc_direction_stays_unit(w in vec_of(5)) {
        prop_assume!(dot(&w, &w) > 1e-6);
        let mut p = OcSoftmaxParams::new(20.0, 0.9, 0.2, w).unwrap();
        prop_assert!((dot(&p.direction, &p.direction) - 1.0).abs() < 1e-12);
        p.direction.iter_mut().for_each(|v| *v *= 3.0);
        p.renormalize().unwrap();
        prop_assert!((dot(&p.direction, &p.direction) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn npair_equal_products() {
    let anchor = [0.5, 0.5, 0.5];
    let base = [1.0, -2.0, 0.25];
    let perms = [[-2.0, 0.25, 1.0], [0.25, 1.0, -2.0], [1.0, 0.25, -2.0]];
    let negs: Vec<&[f64]> = perms.iter().map(|p| p.as_slice()).collect();
    let l = npair_loss(&anchor, &base, &negs, 0.7).unwrap();
    assert!((l.loss - 0.7 * 4f64.ln()).abs() < 1e-12);
}

#[test]
fn corrupted_gradient_is_caught() {
    let rep = grad_check_vec(
        &[0.1, 0.2, -0.3],
        |z| {
            let (l, mut g) = cross_entropy(z, Target::Class(0))?;
            g[1] += 1e-3;
            Ok((l, g))
        },
        TOL,
    )
    .unwrap();
    assert!(!rep.passed);
}
