use proptest::prelude::*;

use srctrace::linalg::Matrix;
use srctrace::metrics::{accuracy, argmax, ece, eer, macro_f1, EceConfig, PredictionBatch};

/// Brute-force binning over `(m/M, (m+1)/M]`, zero in the first bin.
fn ece_oracle(conf: &[f64], correct: &[bool], m: usize) -> f64 {
    let n = conf.len() as f64;
    (0..m)
        .map(|b| {
            let (lo, hi) = (b as f64 / m as f64, (b + 1) as f64 / m as f64);
            let idx: Vec<usize> = (0..conf.len())
                .filter(|&i| (conf[i] > lo || (b == 0 && conf[i] == 0.0)) && conf[i] <= hi)
                .collect();
            if idx.is_empty() {
                return 0.0;
            }
            let size = idx.len() as f64;
            let acc = idx.iter().filter(|&&i| correct[i]).count() as f64 / size;
            let mean = idx.iter().map(|&i| conf[i]).sum::<f64>() / size;
            size / n * (acc - mean).abs()
        })
        .sum()
}

/// Recomputes FAR/FRR from scratch at every candidate threshold.
fn eer_oracle(scores: &[f64], target: &[bool]) -> f64 {
    let mut ts: Vec<f64> = scores.to_vec();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    ts.push(f64::INFINITY);
    let nt = target.iter().filter(|&&t| t).count() as f64;
    let nn = target.len() as f64 - nt;
    let mut prev: Option<(f64, f64)> = None;
    for t in ts {
        let far = (0..scores.len())
            .filter(|&i| !target[i] && scores[i] >= t)
            .count() as f64
            / nn;
        let frr = (0..scores.len())
            .filter(|&i| target[i] && scores[i] < t)
            .count() as f64
            / nt;
        if frr >= far {
            return match prev {
                None => far,
                Some((f0, r0)) => f0 + (f0 - r0) / ((f0 - r0) - (far - frr)) * (far - f0),
            };
        }
        prev = Some((far, frr));
    }
    unreachable!()
}

fn batch_strategy() -> impl Strategy<Value = (Matrix, Vec<usize>)> {
    (2usize..6, 1usize..60).prop_flat_map(|(k, n)| {
        (
            prop::collection::vec(prop::collection::vec(0.001f64..1.0, k), n),
            prop::collection::vec(0..k, n),
        )
            .prop_map(move |(rows, truth)| {
                let probs: Vec<Vec<f64>> = rows
                    .into_iter()
                    .map(|r| {
                        let s: f64 = r.iter().sum();
                        r.into_iter().map(|v| v / s).collect()
                    })
                    .collect();
                (Matrix::from_rows(&probs).unwrap(), truth)
            })
    })
}

fn scores_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..=50).prop_flat_map(|n| {
        (
            prop_oneof![
                prop::collection::vec(-3.0f64..3.0, n),
                // coarse grid to force ties
                prop::collection::vec((0i32..5).prop_map(f64::from), n),
            ],
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_map(|(s, mut t)| {
                t[0] = true;
                let last = t.len() - 1;
                t[last] = false;
                (s, t)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn eer_matches_sweep_oracle((scores, target) in scores_strategy()) {
        let got = eer(&scores, &target).unwrap();
        prop_assert!((got - eer_oracle(&scores, &target)).abs() <= 1e-9);
        prop_assert!((0.0..=1.0).contains(&got));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn ece_matches_binning_oracle((probs, truth) in batch_strategy(), m in prop::sample::select(vec![1usize, 5, 10, 15])) {
        let conf: Vec<f64> = probs.row_iter().map(|r| r[argmax(r)]).collect();
        let correct: Vec<bool> = probs.row_iter().zip(&truth).map(|(r, &t)| argmax(r) == t).collect();
        let batch = PredictionBatch::new(probs, truth).unwrap();
        let got = ece(&batch, EceConfig { m_bins: m }).unwrap();
        prop_assert!((got - ece_oracle(&conf, &correct, m)).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn accuracy_and_f1_ignore_row_order((probs, truth) in batch_strategy(), rot in 0usize..60) {
        let n = truth.len();
        let order: Vec<usize> = (0..n).map(|i| (i + rot) % n).rev().collect();
        let mut p2 = Matrix::zeros(n, probs.cols());
        for (dst, &src) in order.iter().enumerate() {
            p2.row_mut(dst).copy_from_slice(probs.row(src));
        }
        let t2: Vec<usize> = order.iter().map(|&i| truth[i]).collect();
        let a = PredictionBatch::new(probs, truth).unwrap();
        let b = PredictionBatch::new(p2, t2).unwrap();
        prop_assert_eq!(accuracy(&a).unwrap(), accuracy(&b).unwrap());
        prop_assert!((macro_f1(&a).unwrap() - macro_f1(&b).unwrap()).abs() <= 1e-15);
        let f1 = macro_f1(&a).unwrap();
        prop_assert!((0.0..=1.0).contains(&f1));
    }
}

#[test]
fn hand_computed_ece() {
    let probs = Matrix::from_rows(&[[0.9, 0.1], [0.9, 0.1], [0.6, 0.4], [0.6, 0.4]]).unwrap();
    let batch = PredictionBatch::new(probs, vec![0, 1, 0, 0]).unwrap();
    assert!((ece(&batch, EceConfig::default()).unwrap() - 0.4).abs() < 1e-12);
}
