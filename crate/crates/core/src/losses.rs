//! Training criteria with analytic gradients: cross-entropy, RegMixup,
//! multi-class N-pair, their sum for the dispersion stage, the one-class
//! margin softmax used in the real-emphasis stage, and the N-pair weight
//! schedule.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

const TARGET_SUM_TOL: f64 = 1e-9;

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Vec::with_capacity(logits.as_slice().len());
    for row in logits.row_iter() {
        out.extend(softmax(row));
    }
    Matrix::from_vec(logits.rows(), logits.cols(), out).expect("softmax of finite logits is finite")
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Cross-entropy target: a class index or a probability vector.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Class(usize),
    Soft(&'a [f64]),
}

/// Cross-entropy of `softmax(logits)` against `target` and its gradient
/// with respect to the logits, `softmax(logits) − t`.
pub fn cross_entropy(logits: &[f64], target: Target<'_>) -> Result<(f64, Vec<f64>)> {
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numerical("non-finite logit".into()));
    }
    let k = logits.len();
    let log_p = log_softmax(logits);
    let mut grad: Vec<f64> = log_p.iter().map(|lp| lp.exp()).collect();
    let loss = match target {
        Target::Class(c) => {
            if c >= k {
                return Err(Error::Invalid(format!(
                    "class {c} out of range for {k} logits"
                )));
            }
            grad[c] -= 1.0;
            -log_p[c]
        }
        Target::Soft(t) => {
            if t.len() != k {
                return Err(Error::Shape(format!(
                    "soft target of length {} for {k} logits",
                    t.len()
                )));
            }
            if t.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::Invalid("soft target has a negative entry".into()));
            }
            let sum: f64 = t.iter().sum();
            if (sum - 1.0).abs() > TARGET_SUM_TOL {
                return Err(Error::Invalid(format!("soft target sums to {sum}")));
            }
            let mut loss = 0.0;
            for ((g, &tk), lp) in grad.iter_mut().zip(t).zip(&log_p) {
                *g -= tk;
                if tk > 0.0 {
                    loss -= tk * lp;
                }
            }
            loss
        }
    };
    Ok((loss, grad))
}

/// One-hot vector of length `k`.
pub fn one_hot(class: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[class] = 1.0;
    v
}

/// Convex combination `(λ·x_i + (1−λ)·x_j, λ·y_i + (1−λ)·y_j)`.
pub fn mixup_pair(
    x_i: &[f64],
    y_i: &[f64],
    x_j: &[f64],
    y_j: &[f64],
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if x_i.len() != x_j.len() || y_i.len() != y_j.len() {
        return Err(Error::Shape("mixup operands differ in length".into()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Invalid(format!(
            "mixup weight {lambda} outside [0, 1]"
        )));
    }
    Ok((mix(x_i, x_j, lambda), mix(y_i, y_j, lambda)))
}

pub(crate) fn mix(a: &[f64], b: &[f64], lambda: f64) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(&u, &v)| lambda * u + (1.0 - lambda) * v)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixupConfig {
    /// Weight of the interpolated cross-entropy term.
    pub eta: f64,
    /// Concentration of the symmetric Beta distribution λ is drawn from.
    pub alpha: f64,
}

impl Default for MixupConfig {
    fn default() -> Self {
        MixupConfig {
            eta: 1.0,
            alpha: 10.0,
        }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::Config(format!(
                "mixup eta must be non-negative, got {}",
                self.eta
            )));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!(
                "mixup alpha must be positive, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    pub fn sample_lambda<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let beta = Beta::new(self.alpha, self.alpha).expect("validated alpha");
        beta.sample(rng).clamp(0.0, 1.0)
    }
}

/// RegMixup loss of one sample and the gradients for each forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RegMixupLoss {
    pub loss: f64,
    pub grad_clean: Vec<f64>,
    pub grad_mix: Vec<f64>,
}

/// `CE(clean, y) + η·CE(mix, ȳ)`.
pub fn regmixup_loss(
    logits_clean: &[f64],
    target: Target<'_>,
    logits_mix: &[f64],
    mix_target: &[f64],
    eta: f64,
) -> Result<RegMixupLoss> {
    let (clean, grad_clean) = cross_entropy(logits_clean, target)?;
    let (mixed, mut grad_mix) = cross_entropy(logits_mix, Target::Soft(mix_target))?;
    grad_mix.iter_mut().for_each(|g| *g *= eta);
    Ok(RegMixupLoss {
        loss: clean + eta * mixed,
        grad_clean,
        grad_mix,
    })
}

/// Multi-class N-pair loss of one anchor, with gradients for every embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct NpairLoss {
    pub loss: f64,
    pub grad_anchor: Vec<f64>,
    pub grad_positive: Vec<f64>,
    pub grad_negatives: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `β · ln(1 + Σ_i exp(xᵀx⁻_i − xᵀx⁺))` on raw inner products.
pub fn npair_loss(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    beta: f64,
) -> Result<NpairLoss> {
    if negatives.is_empty() {
        return Err(Error::Degenerate(
            "N-pair loss needs at least one negative".into(),
        ));
    }
    let d = anchor.len();
    if positive.len() != d || negatives.iter().any(|n| n.len() != d) {
        return Err(Error::Shape("N-pair embeddings differ in dimension".into()));
    }
    let pos_sim = dot(anchor, positive);
    let diffs: Vec<f64> = negatives.iter().map(|n| dot(anchor, n) - pos_sim).collect();
    // ln(e^0 + Σ e^{s_i}) with the usual max shift
    let m = diffs.iter().copied().fold(0.0f64, f64::max);
    let shifted: Vec<f64> = diffs.iter().map(|s| (s - m).exp()).collect();
    let denom = (-m).exp() + shifted.iter().sum::<f64>();
    let loss = beta * (m + denom.ln());
    // ∂L/∂s_i = β · e^{s_i} / (1 + Σ e^{s_j})
    let weights: Vec<f64> = shifted.iter().map(|e| beta * e / denom).collect();
    let weight_sum: f64 = weights.iter().sum();

    let mut grad_anchor = vec![0.0; d];
    for (w, n) in weights.iter().zip(negatives) {
        for ((g, &nv), &pv) in grad_anchor.iter_mut().zip(n.iter()).zip(positive) {
            *g += w * (nv - pv);
        }
    }
    let grad_positive = anchor.iter().map(|a| -weight_sum * a).collect();
    let grad_negatives = weights
        .iter()
        .map(|w| anchor.iter().map(|a| w * a).collect())
        .collect();
    Ok(NpairLoss {
        loss,
        grad_anchor,
        grad_positive,
        grad_negatives,
    })
}

/// Anchor, positive and negatives of one N-pair term, as batch row indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NpairTuple {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Picks N-pair tuples for a labelled batch. Every sample with a same-class
/// batchmate becomes an anchor; its positive is a uniformly drawn batchmate
/// and its negatives are one uniformly drawn sample from each other class
/// present. A batch with fewer than two classes yields no tuples.
pub fn plan_npair<R: Rng + ?Sized>(labels: &[usize], rng: &mut R) -> Vec<NpairTuple> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Vec::new();
    }
    let mut tuples = Vec::new();
    for (anchor, &c) in labels.iter().enumerate() {
        let mates: Vec<usize> = by_class[&c]
            .iter()
            .copied()
            .filter(|&j| j != anchor)
            .collect();
        let Some(&positive) = mates.choose(rng) else {
            continue;
        };
        let negatives = by_class
            .iter()
            .filter(|(&other, _)| other != c)
            .map(|(_, members)| *members.choose(rng).expect("class lists are non-empty"))
            .collect();
        tuples.push(NpairTuple {
            anchor,
            positive,
            negatives,
        });
    }
    tuples
}

/// Batch inputs of the dispersion-stage loss.
#[derive(Debug, Clone, Copy)]
pub struct FdInputs<'a> {
    /// N×K logits of the clean samples.
    pub logits: &'a Matrix,
    pub targets: &'a [usize],
    /// N×K logits of the interpolated samples.
    pub mix_logits: &'a Matrix,
    /// N×K soft targets of the interpolated samples.
    pub mix_targets: &'a Matrix,
    /// N×D embeddings of the clean samples.
    pub embeddings: &'a Matrix,
    pub tuples: &'a [NpairTuple],
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdLoss {
    pub loss: f64,
    pub regmixup: f64,
    pub npair: f64,
    pub grad_logits: Matrix,
    pub grad_mix_logits: Matrix,
    pub grad_embeddings: Matrix,
}

/// Dispersion-stage loss: mean RegMixup over the batch plus mean N-pair loss
/// over the anchors. With no tuples the N-pair term is skipped.
pub fn fd_loss(inputs: &FdInputs<'_>, beta: f64, eta: f64, normalize: bool) -> Result<FdLoss> {
    let n = inputs.targets.len();
    if n == 0 {
        return Err(Error::Degenerate("empty batch".into()));
    }
    let k = inputs.logits.cols();
    if inputs.logits.rows() != n
        || inputs.mix_logits.rows() != n
        || inputs.mix_logits.cols() != k
        || inputs.mix_targets.rows() != n
        || inputs.mix_targets.cols() != k
        || inputs.embeddings.rows() != n
    {
        return Err(Error::Shape(
            "dispersion-loss inputs disagree on batch shape".into(),
        ));
    }
    let inv_n = 1.0 / n as f64;
    let mut grad_logits = Matrix::zeros(n, k);
    let mut grad_mix_logits = Matrix::zeros(n, k);
    let mut regmixup = 0.0;
    for i in 0..n {
        let term = regmixup_loss(
            inputs.logits.row(i),
            Target::Class(inputs.targets[i]),
            inputs.mix_logits.row(i),
            inputs.mix_targets.row(i),
            eta,
        )?;
        regmixup += term.loss * inv_n;
        for (g, v) in grad_logits.row_mut(i).iter_mut().zip(&term.grad_clean) {
            *g = v * inv_n;
        }
        for (g, v) in grad_mix_logits.row_mut(i).iter_mut().zip(&term.grad_mix) {
            *g = v * inv_n;
        }
    }

    let d = inputs.embeddings.cols();
    let mut grad_embeddings = Matrix::zeros(n, d);
    let mut npair = 0.0;
    if inputs.tuples.is_empty() {
        if beta > 0.0 {
            log::warn!("batch holds a single class; N-pair term skipped");
        }
    } else {
        let (emb, norms) = if normalize {
            normalized_rows(inputs.embeddings)
        } else {
            (inputs.embeddings.clone(), Vec::new())
        };
        let inv_a = 1.0 / inputs.tuples.len() as f64;
        let mut grad_emb = Matrix::zeros(n, d);
        for t in inputs.tuples {
            let negs: Vec<&[f64]> = t.negatives.iter().map(|&j| emb.row(j)).collect();
            let term = npair_loss(emb.row(t.anchor), emb.row(t.positive), &negs, beta)?;
            npair += term.loss * inv_a;
            add_scaled(grad_emb.row_mut(t.anchor), &term.grad_anchor, inv_a);
            add_scaled(grad_emb.row_mut(t.positive), &term.grad_positive, inv_a);
            for (&j, g) in t.negatives.iter().zip(&term.grad_negatives) {
                add_scaled(grad_emb.row_mut(j), g, inv_a);
            }
        }
        if normalize {
            // ∂x̂/∂x · g = (g − (g·x̂) x̂) / ‖x‖
            for i in (0..n).filter(|&i| norms[i] > 0.0) {
                let g = grad_emb.row(i).to_vec();
                let xh = emb.row(i);
                let proj = dot(&g, xh);
                for ((o, gv), xv) in grad_embeddings.row_mut(i).iter_mut().zip(&g).zip(xh) {
                    *o = (gv - proj * xv) / norms[i];
                }
            }
        } else {
            grad_embeddings = grad_emb;
        }
    }
    Ok(FdLoss {
        loss: regmixup + npair,
        regmixup,
        npair,
        grad_logits,
        grad_mix_logits,
        grad_embeddings,
    })
}

fn add_scaled(dst: &mut [f64], src: &[f64], s: f64) {
    for (d, v) in dst.iter_mut().zip(src) {
        *d += s * v;
    }
}

/// Unit rows and their norms. All-zero rows (dead ReLU embeddings) stay
/// zero and receive no gradient.
fn normalized_rows(m: &Matrix) -> (Matrix, Vec<f64>) {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let norm = dot(m.row(i), m.row(i)).sqrt();
        if norm > 0.0 {
            out.row_mut(i).iter_mut().for_each(|v| *v /= norm);
        }
        norms.push(norm);
    }
    (out, norms)
}

/// One-class margin softmax parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OcSoftmaxParams {
    pub scale: f64,
    /// Margin real samples must exceed.
    pub m_real: f64,
    /// Margin fake samples must stay below.
    pub m_fake: f64,
    /// Unit-norm class direction.
    pub direction: Vec<f64>,
}

impl OcSoftmaxParams {
    pub fn new(scale: f64, m_real: f64, m_fake: f64, direction: Vec<f64>) -> Result<Self> {
        if !(m_real > m_fake) {
            return Err(Error::Config(format!(
                "OC-softmax needs m_real > m_fake, got {m_real} <= {m_fake}"
            )));
        }
        let mut p = OcSoftmaxParams {
            scale,
            m_real,
            m_fake,
            direction,
        };
        p.renormalize()?;
        Ok(p)
    }

    pub fn renormalize(&mut self) -> Result<()> {
        let norm = dot(&self.direction, &self.direction).sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Numerical(
                "OC-softmax direction has zero or non-finite norm".into(),
            ));
        }
        self.direction.iter_mut().for_each(|w| *w /= norm);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcSoftmaxLoss {
    pub loss: f64,
    pub grad_embedding: Vec<f64>,
    pub grad_direction: Vec<f64>,
}

/// One-class softmax loss of one embedding.
///
/// With `c = wᵀx̂`, real samples pay `softplus(α(m_real − c))` and fake samples
/// pay `softplus(α(c − m_fake))`. The direction gradient treats `w` as a free
/// vector; callers renormalize after each update.
pub fn oc_softmax_loss(
    embedding: &[f64],
    is_real: bool,
    params: &OcSoftmaxParams,
) -> Result<OcSoftmaxLoss> {
    if !embedding.iter().any(|&v| v != 0.0) {
        return Err(Error::Degenerate(
            "cannot normalize a zero-norm embedding".into(),
        ));
    }
    oc_softmax_or_dead(embedding, is_real, params)
}

/// As [`oc_softmax_loss`], but an all-zero embedding (a dead ReLU output
/// during training) scores as cosine 0 and receives no gradient.
pub(crate) fn oc_softmax_or_dead(
    embedding: &[f64],
    is_real: bool,
    params: &OcSoftmaxParams,
) -> Result<OcSoftmaxLoss> {
    let w = &params.direction;
    if embedding.len() != w.len() {
        return Err(Error::Shape(format!(
            "embedding of dimension {} against direction of dimension {}",
            embedding.len(),
            w.len()
        )));
    }
    let norm = dot(embedding, embedding).sqrt();
    let x_hat: Vec<f64> = if norm > 0.0 {
        embedding.iter().map(|v| v / norm).collect()
    } else {
        vec![0.0; w.len()]
    };
    let c = dot(w, &x_hat);
    let (z, dz_dc) = if is_real {
        (params.scale * (params.m_real - c), -params.scale)
    } else {
        (params.scale * (c - params.m_fake), params.scale)
    };
    let loss = softplus(z);
    let dl_dc = sigmoid(z) * dz_dc;
    let grad_embedding = if norm > 0.0 {
        w.iter()
            .zip(&x_hat)
            .map(|(wv, xv)| dl_dc * (wv - c * xv) / norm)
            .collect()
    } else {
        vec![0.0; w.len()]
    };
    let grad_direction = x_hat.iter().map(|xv| dl_dc * xv).collect();
    Ok(OcSoftmaxLoss {
        loss,
        grad_embedding,
        grad_direction,
    })
}

/// Per-epoch N-pair weight: zero through the warm-up, then a linear ramp
/// from `init` to `final_value` at `final_epoch`, constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BetaSchedule {
    pub warmup_epochs: usize,
    pub init: f64,
    #[serde(rename = "final")]
    pub final_value: f64,
    pub final_epoch: usize,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        BetaSchedule {
            warmup_epochs: 20,
            init: 1e-3,
            final_value: 0.8,
            final_epoch: 50,
        }
    }
}

impl BetaSchedule {
    /// Schedule that keeps the N-pair term off.
    pub fn disabled() -> Self {
        BetaSchedule {
            warmup_epochs: usize::MAX,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs != usize::MAX && self.final_epoch <= self.warmup_epochs {
            return Err(Error::Config(
                "beta schedule final_epoch must come after the warm-up".into(),
            ));
        }
        if !(self.init >= 0.0) || !(self.final_value >= self.init) {
            return Err(Error::Config(
                "beta schedule needs 0 <= init <= final".into(),
            ));
        }
        Ok(())
    }
}

/// N-pair weight for a 1-based epoch.
pub fn beta_at(epoch: usize, sched: &BetaSchedule) -> f64 {
    if epoch <= sched.warmup_epochs {
        return 0.0;
    }
    if epoch >= sched.final_epoch {
        return sched.final_value;
    }
    let first = sched.warmup_epochs + 1;
    let span = (sched.final_epoch - first) as f64;
    sched.init + (sched.final_value - sched.init) * (epoch - first) as f64 / span
}
