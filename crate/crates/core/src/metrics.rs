//! Classification, calibration, verification and distribution metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{psd_sqrt, psd_sqrt_trace, Matrix, MeanCov};

const ROW_SUM_TOL: f64 = 1e-9;
/// Probabilities are floored here before taking logs.
pub const NLL_FLOOR: f64 = 1e-12;

/// Row-stochastic predictions paired with true class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBatch {
    probs: Matrix,
    true_idx: Vec<usize>,
}

impl PredictionBatch {
    pub fn new(probs: Matrix, true_idx: Vec<usize>) -> Result<Self> {
        if probs.rows() != true_idx.len() {
            return Err(Error::Shape(format!(
                "{} probability rows for {} labels",
                probs.rows(),
                true_idx.len()
            )));
        }
        let k = probs.cols();
        for (i, row) in probs.row_iter().enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Invalid(format!(
                    "row {i} has a probability outside [0, 1]"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Invalid(format!("row {i} sums to {sum}")));
            }
            if true_idx[i] >= k {
                return Err(Error::Invalid(format!(
                    "row {i} has class index {} with only {k} classes",
                    true_idx[i]
                )));
            }
        }
        Ok(PredictionBatch { probs, true_idx })
    }

    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn true_idx(&self) -> &[usize] {
        &self.true_idx
    }

    pub fn len(&self) -> usize {
        self.true_idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.true_idx.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.probs.cols()
    }

    /// Predicted class per row.
    pub fn predictions(&self) -> Vec<usize> {
        self.probs.row_iter().map(argmax).collect()
    }

    fn require_rows(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Degenerate("empty prediction batch".into()));
        }
        Ok(())
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(batch: &PredictionBatch) -> Result<f64> {
    batch.require_rows()?;
    let correct = batch
        .probs
        .row_iter()
        .zip(&batch.true_idx)
        .filter(|(row, &t)| argmax(row) == t)
        .count();
    Ok(correct as f64 / batch.len() as f64)
}

/// Unweighted mean of per-class F1 over predicted labels.
pub fn macro_f1(batch: &PredictionBatch) -> Result<f64> {
    batch.require_rows()?;
    macro_f1_labels(&batch.predictions(), &batch.true_idx, batch.n_classes())
}

/// Macro F1 from hard labels. Classes that appear in neither predictions nor
/// truths are left out of the mean.
pub fn macro_f1_labels(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::Degenerate("empty prediction batch".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} truths",
            pred.len(),
            truth.len()
        )));
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= n_classes || t >= n_classes {
            return Err(Error::Invalid(format!(
                "class index out of range for {n_classes} classes"
            )));
        }
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..n_classes {
        let denom = 2 * tp[c] + fp[c] + fn_[c];
        if denom == 0 {
            continue;
        }
        present += 1;
        sum += 2.0 * tp[c] as f64 / denom as f64;
    }
    Ok(sum / present as f64)
}

/// Mean negative log-likelihood of the true class, in nats.
pub fn nll(batch: &PredictionBatch) -> Result<f64> {
    batch.require_rows()?;
    let total: f64 = batch
        .probs
        .row_iter()
        .zip(&batch.true_idx)
        .map(|(row, &t)| -row[t].max(NLL_FLOOR).ln())
        .sum();
    Ok(total / batch.len() as f64)
}

/// Reliability-diagram binning for ECE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EceConfig {
    pub m_bins: usize,
}

impl Default for EceConfig {
    fn default() -> Self {
        EceConfig { m_bins: 10 }
    }
}

/// Bin of a confidence under equal-width `(m/M, (m+1)/M]` bins. Zero goes to
/// the first bin. Edges are the floating-point values `m as f64 / M as f64`.
pub fn ece_bin(conf: f64, m_bins: usize) -> usize {
    let m_f = m_bins as f64;
    let mut bin = ((conf * m_f).ceil() as isize - 1).clamp(0, m_bins as isize - 1) as usize;
    while bin > 0 && conf <= bin as f64 / m_f {
        bin -= 1;
    }
    while bin + 1 < m_bins && conf > (bin + 1) as f64 / m_f {
        bin += 1;
    }
    bin
}

/// Expected calibration error with max-probability confidence.
pub fn ece(batch: &PredictionBatch, cfg: EceConfig) -> Result<f64> {
    batch.require_rows()?;
    if cfg.m_bins == 0 {
        return Err(Error::Invalid("ECE needs at least one bin".into()));
    }
    let confidences: Vec<f64> = batch.probs.row_iter().map(|r| r[argmax(r)]).collect();
    let correct: Vec<bool> = batch
        .probs
        .row_iter()
        .zip(&batch.true_idx)
        .map(|(r, &t)| argmax(r) == t)
        .collect();
    Ok(ece_from_parts(&confidences, &correct, cfg.m_bins))
}

/// ECE from per-sample confidence and correctness.
pub fn ece_from_parts(confidences: &[f64], correct: &[bool], m_bins: usize) -> f64 {
    let mut count = vec![0usize; m_bins];
    let mut conf_sum = vec![0.0; m_bins];
    let mut hits = vec![0usize; m_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = ece_bin(c, m_bins);
        count[b] += 1;
        conf_sum[b] += c;
        hits[b] += usize::from(ok);
    }
    let n = confidences.len() as f64;
    let mut total = 0.0;
    for b in 0..m_bins {
        if count[b] == 0 {
            continue;
        }
        let size = count[b] as f64;
        let acc = hits[b] as f64 / size;
        let conf = conf_sum[b] / size;
        total += size / n * (acc - conf).abs();
    }
    total
}

/// Equal error rate under the rule "accept when score ≥ threshold".
///
/// Operating points are taken at every distinct score (plus one above the
/// maximum, where everything is rejected). The EER is read off where the
/// false-rejection rate first meets the false-acceptance rate, interpolating
/// linearly between the two bracketing points.
pub fn eer(scores: &[f64], is_target: &[bool]) -> Result<f64> {
    Ok(eer_operating_point(scores, is_target)?.rate)
}

/// Where the FAR/FRR curves cross, with the thresholds that bracket it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EerPoint {
    pub rate: f64,
    /// Last threshold with FRR < FAR.
    pub lower: f64,
    /// First threshold with FRR ≥ FAR; `+∞` when only rejecting everything reaches it.
    pub upper: f64,
}

pub fn eer_operating_point(scores: &[f64], is_target: &[bool]) -> Result<EerPoint> {
    if scores.len() != is_target.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            is_target.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Invalid("non-finite score".into()));
    }
    let n_tgt = is_target.iter().filter(|&&t| t).count();
    let n_non = is_target.len() - n_tgt;
    if n_tgt == 0 || n_non == 0 {
        return Err(Error::Degenerate(
            "EER needs both target and non-target scores".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Walking thresholds upward: at threshold t, targets below t are false
    // rejections and non-targets at or above t are false acceptances.
    let (nt, nn) = (n_tgt as f64, n_non as f64);
    let mut tgt_below = 0usize;
    let mut non_below = 0usize;
    let mut prev: Option<(f64, f64, f64)> = None; // (threshold, far, frr)
    let mut i = 0;
    while i <= order.len() {
        let threshold = if i < order.len() {
            scores[order[i]]
        } else {
            f64::INFINITY
        };
        let far = (n_non - non_below) as f64 / nn;
        let frr = tgt_below as f64 / nt;
        if frr >= far {
            let point = match prev {
                None => EerPoint {
                    rate: far,
                    lower: threshold,
                    upper: threshold,
                },
                Some((t0, far0, frr0)) => {
                    let d0 = far0 - frr0;
                    let d1 = far - frr;
                    let alpha = d0 / (d0 - d1);
                    EerPoint {
                        rate: far0 + alpha * (far - far0),
                        lower: t0,
                        upper: threshold,
                    }
                }
            };
            return Ok(point);
        }
        prev = Some((threshold, far, frr));
        if i == order.len() {
            break;
        }
        // consume every sample tied at this threshold
        while i < order.len() && scores[order[i]] == threshold {
            if is_target[order[i]] {
                tgt_below += 1;
            } else {
                non_below += 1;
            }
            i += 1;
        }
    }
    unreachable!("rejecting everything always gives FRR = 1 ≥ FAR = 0")
}

/// Fréchet distance between two Gaussians.
///
/// The cross term uses `Tr((Σa^{1/2} Σb Σa^{1/2})^{1/2})`, which equals
/// `Tr((Σa Σb)^{1/2})` and stays a symmetric eigenproblem.
pub fn frechet_distance(a: &MeanCov, b: &MeanCov) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "Fréchet distance between dimensions {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let root_a = psd_sqrt(&a.cov)?;
    // reject a non-PSD Σb up front rather than through the product
    psd_sqrt_trace(&b.cov)?;
    let mut inner = root_a.matmul(&b.cov)?.matmul(&root_a)?;
    inner.symmetrize();
    let cross = psd_sqrt_trace(&inner)?;
    let trace_term = a.cov.trace() + b.cov.trace() - 2.0 * cross;
    let value = mean_term + trace_term;
    let scale = mean_term + a.cov.trace() + b.cov.trace();
    if value < 0.0 {
        if value < -1e-8 * scale.max(1.0) {
            return Err(Error::Numerical(format!(
                "Fréchet distance evaluated to {value:e}"
            )));
        }
        return Ok(0.0);
    }
    Ok(value)
}

/// Flat metric report; absent measures serialize as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub eer: Option<f64>,
    pub nll: f64,
    pub ece: f64,
    pub frechet: Option<f64>,
}

impl MetricReport {
    /// Accuracy, macro F1, NLL and ECE of a batch; EER and Fréchet left empty.
    pub fn from_batch(batch: &PredictionBatch, cfg: EceConfig) -> Result<Self> {
        Ok(MetricReport {
            accuracy: accuracy(batch)?,
            macro_f1: macro_f1(batch)?,
            eer: None,
            nll: nll(batch)?,
            ece: ece(batch, cfg)?,
            frechet: None,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    fn batch(rows: &[&[f64]], truth: &[usize]) -> PredictionBatch {
        PredictionBatch::new(Matrix::from_rows(rows).unwrap(), truth.to_vec()).unwrap()
    }

    #[test]
    fn accuracy_cases() {
        let b = batch(&[&[1.0, 0.0], &[0.0, 1.0]], &[0, 1]);
        assert_eq!(accuracy(&b).unwrap(), 1.0);
        let b = batch(&[&[1.0, 0.0], &[0.0, 1.0]], &[1, 0]);
        assert_eq!(accuracy(&b).unwrap(), 0.0);
        let b = batch(
            &[&[0.9, 0.1], &[0.2, 0.8], &[0.6, 0.4], &[0.3, 0.7]],
            &[0, 1, 0, 0],
        );
        assert_eq!(accuracy(&b).unwrap(), 0.75);
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn empty_batch_is_degenerate() {
        let b = PredictionBatch::new(Matrix::zeros(0, 3), vec![]).unwrap();
        assert!(matches!(accuracy(&b), Err(Error::Degenerate(_))));
        assert!(matches!(macro_f1(&b), Err(Error::Degenerate(_))));
        assert!(matches!(nll(&b), Err(Error::Degenerate(_))));
        assert!(matches!(
            ece(&b, EceConfig::default()),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn batch_validation() {
        assert!(PredictionBatch::new(Matrix::from_rows(&[[0.5, 0.6]]).unwrap(), vec![0]).is_err());
        assert!(PredictionBatch::new(Matrix::from_rows(&[[0.5, 0.5]]).unwrap(), vec![2]).is_err());
    }

    #[test]
    fn f1_cases() {
        let b = batch(
            &[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]],
            &[0, 1, 2],
        );
        assert_eq!(macro_f1(&b).unwrap(), 1.0);
        // TP=1, FP=1, FN=1, TN=1 for class 1
        let f1 = macro_f1_labels(&[1, 1, 0, 0], &[1, 0, 1, 0], 2).unwrap();
        assert!((f1 - 0.5).abs() < 1e-15);
        let f1 = macro_f1_labels(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert!((f1 - 1.0 / 3.0).abs() < 1e-15);
        // class 2 never seen: excluded from the mean
        let f1 = macro_f1_labels(&[0, 1], &[0, 1], 3).unwrap();
        assert_eq!(f1, 1.0);
    }

    #[test]
    fn nll_cases() {
        let b = batch(&[&[1.0, 0.0], &[0.0, 1.0]], &[0, 1]);
        assert_eq!(nll(&b).unwrap(), 0.0);
        let b = batch(&[&[0.25; 4], &[0.25; 4]], &[0, 3]);
        assert!((nll(&b).unwrap() - 4f64.ln()).abs() < 1e-15);
        let b = batch(&[&[0.5, 0.5, 0.0, 0.0], &[0.25, 0.25, 0.25, 0.25]], &[0, 2]);
        assert!((nll(&b).unwrap() - 1.039_720_770_839_917_9).abs() < 1e-12);
        let b = batch(&[&[1.0, 0.0]], &[1]);
        assert!((nll(&b).unwrap() + NLL_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn ece_hand_case() {
        let b = batch(
            &[&[0.9, 0.1], &[0.9, 0.1], &[0.6, 0.4], &[0.4, 0.6]],
            &[0, 1, 0, 1],
        );
        assert!((ece(&b, EceConfig::default()).unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn ece_perfect_one_hot() {
        let b = batch(&[&[1.0, 0.0], &[0.0, 1.0]], &[0, 1]);
        assert_eq!(ece(&b, EceConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn ece_bins_are_left_open() {
        assert_eq!(ece_bin(0.0, 10), 0);
        assert_eq!(ece_bin(0.1, 10), 0);
        assert_eq!(ece_bin(0.3, 10), 2);
        assert_eq!(ece_bin(0.30000000000000004, 10), 3);
        assert_eq!(ece_bin(1.0, 10), 9);
        assert_eq!(ece_bin(0.7, 1), 0);
    }

    #[test]
    fn eer_cases() {
        let t = [true, true, false, false];
        assert_eq!(eer(&[0.9, 0.8, 0.2, 0.1], &t).unwrap(), 0.0);
        assert_eq!(eer(&[0.6, 0.4, 0.5, 0.3], &t).unwrap(), 0.5);
        assert_eq!(eer(&[0.5; 4], &t).unwrap(), 0.5);
        assert_eq!(eer(&[0.1, 0.2, 0.8, 0.9], &t).unwrap(), 1.0);
        assert!(matches!(
            eer(&[0.1, 0.2], &[true, true]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn eer_brackets_separable_gap() {
        let p = eer_operating_point(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!((p.lower, p.upper), (0.2, 0.8));
    }

    #[test]
    fn frechet_cases() {
        let a = MeanCov::new(vec![0.0], Matrix::from_diag(&[1.0]), 10).unwrap();
        let b = MeanCov::new(vec![3.0], Matrix::from_diag(&[1.0]), 10).unwrap();
        assert!((frechet_distance(&a, &b).unwrap() - 9.0).abs() < 1e-12);
        assert_eq!(frechet_distance(&a, &a).unwrap(), 0.0);

        let a = MeanCov::new(vec![0.0, 0.0], Matrix::from_diag(&[1.0, 4.0]), 10).unwrap();
        let b = MeanCov::new(vec![1.0, 1.0], Matrix::from_diag(&[4.0, 1.0]), 10).unwrap();
        assert!((frechet_distance(&a, &b).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn frechet_rejects_mismatch() {
        let a = MeanCov::new(vec![0.0], Matrix::from_diag(&[1.0]), 10).unwrap();
        let b = MeanCov::new(vec![0.0, 0.0], Matrix::identity(2), 10).unwrap();
        assert!(matches!(frechet_distance(&a, &b), Err(Error::Shape(_))));
        let c = MeanCov::new(vec![0.0, 0.0], Matrix::from_diag(&[1.0, -2.0]), 10).unwrap();
        assert!(matches!(frechet_distance(&b, &c), Err(Error::NotPsd(_))));
    }

    #[test]
    fn report_keys() {
        let r = MetricReport {
            accuracy: 1.0,
            macro_f1: 1.0,
            eer: None,
            nll: 0.0,
            ece: 0.0,
            frechet: Some(0.0),
        };
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            ["accuracy", "ece", "eer", "frechet", "macro_f1", "nll"]
        );
    }
}
