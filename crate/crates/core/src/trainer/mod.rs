//! Two-stage training of the feedforward back-end.
//!
//! The real-emphasis stage trains a binary real/fake head with cross-entropy
//! plus a one-class margin loss on the embedding. The dispersion stage
//! swaps in a source head and trains with RegMixup (interpolating
//! embeddings and soft labels) plus the scheduled N-pair loss.

pub mod adam;
pub mod gradcheck;
pub mod model;

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::{
    beta_at, cross_entropy, fd_loss, mix, oc_softmax_or_dead, one_hot, plan_npair, BetaSchedule,
    FdInputs, MixupConfig, NpairTuple, OcSoftmaxParams, Target,
};
use crate::metrics::argmax;
use crate::rng;

pub use adam::{adam_step, lr_at, AdamState};
pub use gradcheck::{grad_check, grad_check_vec, GradCheckReport};
pub use model::{Checkpoint, Forward, MlpModel};

/// Label of bona fide samples in the real-emphasis stage.
pub const REAL: usize = 0;
/// Label of spoofed samples in the real-emphasis stage.
pub const FAKE: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    /// Epochs (1-based) at which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Micro-batches whose gradients are averaged into one update.
    pub accumulation_steps: usize,
    /// Set from the run-level seed; not part of the config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 5e-4,
            lr_decay: 0.5,
            lr_milestones: vec![30, 40],
            epochs: 50,
            batch_size: 64,
            accumulation_steps: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if !(self.weight_decay >= 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::Config(
                "weight_decay must be >= 0 and lr_decay > 0".into(),
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.accumulation_steps == 0 {
            return Err(Error::Config(
                "epochs, batch_size and accumulation_steps must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Features with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledData {
    pub x: Matrix,
    pub y: Vec<usize>,
}

impl LabeledData {
    pub fn new(x: Matrix, y: Vec<usize>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::Shape(format!(
                "{} rows for {} labels",
                x.rows(),
                y.len()
            )));
        }
        Ok(LabeledData { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn subset(&self, rows: &[usize]) -> LabeledData {
        let d = self.x.cols();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(self.x.row(r));
        }
        LabeledData {
            x: Matrix::from_vec(rows.len(), d, data).expect("rows come from a valid matrix"),
            y: rows.iter().map(|&r| self.y[r]).collect(),
        }
    }

    fn n_classes_present(&self) -> usize {
        let mut seen: Vec<usize> = self.y.clone();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageData {
    pub train: LabeledData,
    pub dev: LabeledData,
}

/// Outcome of one training stage. `model` is the checkpoint with the best
/// dev accuracy (latest epoch on ties).
#[derive(Debug, Clone, PartialEq)]
pub struct StageResult {
    pub model: MlpModel,
    pub oc: Option<OcSoftmaxParams>,
    pub loss_trace: Vec<f64>,
    pub dev_accuracy: Vec<f64>,
    pub best_epoch: usize,
}

impl StageResult {
    pub fn best_dev_accuracy(&self) -> f64 {
        self.dev_accuracy[self.best_epoch - 1]
    }
}

/// Loss, model gradient and OC direction gradient of one real-emphasis batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ReBatch {
    pub loss: f64,
    pub grads: Vec<f64>,
    pub grad_direction: Vec<f64>,
}

/// Mean cross-entropy over the binary head plus mean one-class loss on the
/// embeddings.
pub fn re_batch_loss(
    model: &MlpModel,
    oc: &OcSoftmaxParams,
    x: &Matrix,
    y: &[usize],
) -> Result<ReBatch> {
    let n = y.len();
    if n == 0 {
        return Err(Error::Degenerate("empty batch".into()));
    }
    let fwd = model.forward(x)?;
    let inv_n = 1.0 / n as f64;
    let emb = fwd.embeddings();
    let mut grad_logits = Matrix::zeros(n, model.n_outputs());
    let mut grad_emb = Matrix::zeros(n, emb.cols());
    let mut grad_direction = vec![0.0; oc.direction.len()];
    let mut loss = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        let (ce, g) = cross_entropy(fwd.logits.row(i), Target::Class(yi))?;
        let oc_term = oc_softmax_or_dead(emb.row(i), yi == REAL, oc)?;
        loss += (ce + oc_term.loss) * inv_n;
        for (dst, v) in grad_logits.row_mut(i).iter_mut().zip(&g) {
            *dst = v * inv_n;
        }
        for (dst, v) in grad_emb.row_mut(i).iter_mut().zip(&oc_term.grad_embedding) {
            *dst = v * inv_n;
        }
        for (dst, v) in grad_direction.iter_mut().zip(&oc_term.grad_direction) {
            *dst += v * inv_n;
        }
    }
    let grads = model.backward(&fwd, &grad_logits, Some(&grad_emb))?;
    Ok(ReBatch {
        loss,
        grads,
        grad_direction,
    })
}

/// Random choices behind one dispersion-stage batch: mixup partner and
/// weight per sample, and the N-pair tuples.
#[derive(Debug, Clone, PartialEq)]
pub struct FdPlan {
    pub partners: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub tuples: Vec<NpairTuple>,
}

impl FdPlan {
    /// Fresh λ per pair, partner drawn uniformly from the batch.
    pub fn sample<R: Rng + ?Sized>(labels: &[usize], mixup: &MixupConfig, rng: &mut R) -> Self {
        let n = labels.len();
        let partners = (0..n).map(|_| rng.random_range(0..n)).collect();
        let lambdas = (0..n).map(|_| mixup.sample_lambda(rng)).collect();
        let tuples = plan_npair(labels, rng);
        FdPlan {
            partners,
            lambdas,
            tuples,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdBatch {
    pub loss: f64,
    pub regmixup: f64,
    pub npair: f64,
    pub grads: Vec<f64>,
}

/// Dispersion-stage loss of one batch and its parameter gradient.
///
/// Mixup interpolates embeddings, which then go through the output layer
/// again; the interpolated gradient flows back to both source embeddings.
pub fn fd_batch_loss(
    model: &MlpModel,
    x: &Matrix,
    y: &[usize],
    plan: &FdPlan,
    beta: f64,
    eta: f64,
    normalize: bool,
) -> Result<FdBatch> {
    let n = y.len();
    if plan.partners.len() != n || plan.lambdas.len() != n {
        return Err(Error::Shape("mixup plan does not match batch".into()));
    }
    let k = model.n_outputs();
    let fwd = model.forward(x)?;
    let emb = fwd.embeddings();
    let d = emb.cols();
    let mut mixed = Matrix::zeros(n, d);
    let mut mix_targets = Matrix::zeros(n, k);
    for i in 0..n {
        let (j, lambda) = (plan.partners[i], plan.lambdas[i]);
        mixed
            .row_mut(i)
            .copy_from_slice(&mix(emb.row(i), emb.row(j), lambda));
        mix_targets
            .row_mut(i)
            .copy_from_slice(&mix(&one_hot(y[i], k), &one_hot(y[j], k), lambda));
    }
    let mix_logits = model.head_forward(&mixed)?;
    let terms = fd_loss(
        &FdInputs {
            logits: &fwd.logits,
            targets: y,
            mix_logits: &mix_logits,
            mix_targets: &mix_targets,
            embeddings: emb,
            tuples: &plan.tuples,
        },
        beta,
        eta,
        normalize,
    )?;
    let mut head_grads = vec![0.0; model.n_params()];
    let grad_mixed = model.head_backward(&mixed, &terms.grad_mix_logits, &mut head_grads)?;
    let mut grad_emb = terms.grad_embeddings;
    for i in 0..n {
        let (j, lambda) = (plan.partners[i], plan.lambdas[i]);
        for c in 0..d {
            let g = grad_mixed[(i, c)];
            grad_emb[(i, c)] += lambda * g;
            grad_emb[(j, c)] += (1.0 - lambda) * g;
        }
    }
    let mut grads = model.backward(&fwd, &terms.grad_logits, Some(&grad_emb))?;
    for (g, h) in grads.iter_mut().zip(&head_grads) {
        *g += h;
    }
    Ok(FdBatch {
        loss: terms.loss,
        regmixup: terms.regmixup,
        npair: terms.npair,
        grads,
    })
}

/// Contiguous, near-equal micro-batch ranges.
pub fn micro_batches(n: usize, steps: usize) -> Vec<Range<usize>> {
    let steps = steps.clamp(1, n.max(1));
    let base = n / steps;
    let extra = n % steps;
    let mut out = Vec::with_capacity(steps);
    let mut start = 0;
    for s in 0..steps {
        let len = base + usize::from(s < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}

/// Combines per-micro-batch mean losses/gradients into the full-batch mean.
fn accumulate<F>(n: usize, steps: usize, mut f: F) -> Result<(f64, Vec<f64>, Vec<f64>)>
where
    F: FnMut(Range<usize>) -> Result<(f64, Vec<f64>, Vec<f64>)>,
{
    let mut total: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    for range in micro_batches(n, steps) {
        let w = range.len() as f64 / n as f64;
        let (loss, g, extra) = f(range)?;
        match &mut total {
            None => {
                total = Some((
                    w * loss,
                    g.iter().map(|v| w * v).collect(),
                    extra.iter().map(|v| w * v).collect(),
                ))
            }
            Some((tl, tg, te)) => {
                *tl += w * loss;
                tg.iter_mut().zip(&g).for_each(|(a, b)| *a += w * b);
                te.iter_mut().zip(&extra).for_each(|(a, b)| *a += w * b);
            }
        }
    }
    total.ok_or_else(|| Error::Degenerate("empty batch".into()))
}

/// Real-emphasis gradient of a batch split into `steps` micro-batches.
pub fn re_accumulated(
    model: &MlpModel,
    oc: &OcSoftmaxParams,
    data: &LabeledData,
    steps: usize,
) -> Result<ReBatch> {
    let (loss, grads, grad_direction) = accumulate(data.len(), steps, |r| {
        let rows: Vec<usize> = r.collect();
        let part = data.subset(&rows);
        let b = re_batch_loss(model, oc, &part.x, &part.y)?;
        Ok((b.loss, b.grads, b.grad_direction))
    })?;
    Ok(ReBatch {
        loss,
        grads,
        grad_direction,
    })
}

/// Accuracy of the model's argmax on `data`.
pub fn evaluate_accuracy(model: &MlpModel, data: &LabeledData) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Degenerate("empty evaluation set".into()));
    }
    let fwd = model.forward(&data.x)?;
    let correct = fwd
        .logits
        .row_iter()
        .zip(&data.y)
        .filter(|(r, &t)| argmax(r) == t)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

fn check_labels(data: &LabeledData, n_classes: usize, what: &str) -> Result<()> {
    if let Some(&bad) = data.y.iter().find(|&&c| c >= n_classes) {
        return Err(Error::Invalid(format!(
            "{what} label {bad} outside {n_classes} model outputs"
        )));
    }
    Ok(())
}

fn check_stage(model: &MlpModel, data: &StageData, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if data.train.x.cols() != model.input_dim() || data.dev.x.cols() != model.input_dim() {
        return Err(Error::Shape(format!(
            "features must have {} columns",
            model.input_dim()
        )));
    }
    if data.dev.is_empty() {
        return Err(Error::Degenerate("dev split is empty".into()));
    }
    check_labels(&data.train, model.n_outputs(), "train")?;
    check_labels(&data.dev, model.n_outputs(), "dev")
}

struct Tracker {
    best: Option<(f64, usize, MlpModel, Option<OcSoftmaxParams>)>,
    loss_trace: Vec<f64>,
    dev_accuracy: Vec<f64>,
}

impl Tracker {
    fn new() -> Self {
        Tracker {
            best: None,
            loss_trace: Vec::new(),
            dev_accuracy: Vec::new(),
        }
    }

    fn record(
        &mut self,
        epoch: usize,
        loss: f64,
        acc: f64,
        model: &MlpModel,
        oc: Option<&OcSoftmaxParams>,
    ) {
        self.loss_trace.push(loss);
        self.dev_accuracy.push(acc);
        if self.best.as_ref().is_none_or(|(best, ..)| acc >= *best) {
            self.best = Some((acc, epoch, model.clone(), oc.cloned()));
        }
    }

    fn finish(self) -> StageResult {
        let (_, best_epoch, model, oc) = self.best.expect("at least one epoch ran");
        StageResult {
            model,
            oc,
            loss_trace: self.loss_trace,
            dev_accuracy: self.dev_accuracy,
            best_epoch,
        }
    }
}

/// Real-emphasis stage on binary labels ([`REAL`] / [`FAKE`]).
pub fn train_re(
    model: &MlpModel,
    oc: &OcSoftmaxParams,
    data: &StageData,
    cfg: &TrainConfig,
) -> Result<StageResult> {
    check_stage(model, data, cfg)?;
    if model.n_outputs() != 2 {
        return Err(Error::Invalid(format!(
            "real-emphasis head must have 2 outputs, has {}",
            model.n_outputs()
        )));
    }
    if data.train.n_classes_present() < 2 {
        return Err(Error::Degenerate(
            "real-emphasis training needs both real and fake samples".into(),
        ));
    }
    let mut rng = rng::stream(cfg.seed, "train-re");
    let mut model = model.clone();
    let mut oc = oc.clone();
    let mut state = AdamState::new(model.n_params());
    let mut oc_state = AdamState::new(oc.direction.len());
    let mut tracker = Tracker::new();
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 1..=cfg.epochs {
        let lr = lr_at(epoch, cfg.lr, cfg.lr_decay, &cfg.lr_milestones);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
            let batch = data.train.subset(rows);
            let step = re_accumulated(&model, &oc, &batch, cfg.accumulation_steps)
                .map_err(|e| at_batch(e, epoch, b + 1))?;
            adam_step(
                model.params_mut(),
                &step.grads,
                &mut state,
                lr,
                cfg.weight_decay,
            )
            .map_err(|e| at_batch(e, epoch, b + 1))?;
            adam_step(
                &mut oc.direction,
                &step.grad_direction,
                &mut oc_state,
                lr,
                0.0,
            )
            .map_err(|e| at_batch(e, epoch, b + 1))?;
            oc.renormalize().map_err(|e| at_batch(e, epoch, b + 1))?;
            epoch_loss += step.loss * rows.len() as f64;
        }
        let acc = evaluate_accuracy(&model, &data.dev)?;
        tracker.record(
            epoch,
            epoch_loss / data.train.len() as f64,
            acc,
            &model,
            Some(&oc),
        );
        log::debug!(
            "re epoch {epoch}: loss {:.5} dev acc {acc:.4}",
            epoch_loss / data.train.len() as f64
        );
    }
    Ok(tracker.finish())
}

/// Loss settings of the dispersion stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdSettings {
    pub schedule: BetaSchedule,
    pub mixup: MixupConfig,
    pub normalize: bool,
}

/// Dispersion stage on source labels.
pub fn train_fd(
    model: &MlpModel,
    data: &StageData,
    settings: &FdSettings,
    cfg: &TrainConfig,
) -> Result<StageResult> {
    check_stage(model, data, cfg)?;
    settings.mixup.validate()?;
    settings.schedule.validate()?;
    if model.n_outputs() < 2 || data.train.n_classes_present() < 2 {
        return Err(Error::Degenerate(
            "dispersion training needs at least 2 source classes".into(),
        ));
    }
    let mut rng = rng::stream(cfg.seed, "train-fd");
    let mut model = model.clone();
    let mut state = AdamState::new(model.n_params());
    let mut tracker = Tracker::new();

    for epoch in 1..=cfg.epochs {
        let lr = lr_at(epoch, cfg.lr, cfg.lr_decay, &cfg.lr_milestones);
        let beta = beta_at(epoch, &settings.schedule);
        let mut epoch_loss = 0.0;
        for (b, rows) in stratified_batches(&data.train.y, cfg.batch_size, &mut rng)
            .iter()
            .enumerate()
        {
            let batch = data.train.subset(rows);
            let (loss, grads, _) = accumulate(batch.len(), cfg.accumulation_steps, |r| {
                let idx: Vec<usize> = r.collect();
                let part = batch.subset(&idx);
                let plan = FdPlan::sample(&part.y, &settings.mixup, &mut rng);
                let out = fd_batch_loss(
                    &model,
                    &part.x,
                    &part.y,
                    &plan,
                    beta,
                    settings.mixup.eta,
                    settings.normalize,
                )?;
                Ok((out.loss, out.grads, Vec::new()))
            })
            .map_err(|e| at_batch(e, epoch, b + 1))?;
            adam_step(model.params_mut(), &grads, &mut state, lr, cfg.weight_decay)
                .map_err(|e| at_batch(e, epoch, b + 1))?;
            epoch_loss += loss * rows.len() as f64;
        }
        let acc = evaluate_accuracy(&model, &data.dev)?;
        tracker.record(
            epoch,
            epoch_loss / data.train.len() as f64,
            acc,
            &model,
            None,
        );
        log::debug!(
            "fd epoch {epoch}: beta {beta:.4} loss {:.5} dev acc {acc:.4}",
            epoch_loss / data.train.len() as f64
        );
    }
    Ok(tracker.finish())
}

fn at_batch(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Numerical(msg) => Error::Training { epoch, batch, msg },
        other => other,
    }
}

/// Shuffles each class and spreads it evenly over the epoch (balanced
/// classes come out round-robin), then cuts the result into batches. Any
/// single-class batch is merged into its neighbour, so every batch mixes
/// classes whenever the labels hold at least two.
pub fn stratified_batches<R: Rng + ?Sized>(
    labels: &[usize],
    batch_size: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &c) in labels.iter().enumerate() {
        per_class[c].push(i);
    }
    for members in &mut per_class {
        members.shuffle(rng);
    }
    // (relative position, class, sample); the position of the p-th of m
    // members is (p + ½)/m
    let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(labels.len());
    for (c, members) in per_class.iter().enumerate() {
        let m = members.len() as f64;
        keyed.extend(
            members
                .iter()
                .enumerate()
                .map(|(p, &i)| ((p as f64 + 0.5) / m, c, i)),
        );
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let order: Vec<usize> = keyed.into_iter().map(|(_, _, i)| i).collect();

    let single_class = |b: &[usize]| b.iter().all(|&i| labels[i] == labels[b[0]]);
    let mut batches: Vec<Vec<usize>> = Vec::new();
    for chunk in order.chunks(batch_size.max(1)) {
        match batches.last_mut() {
            Some(last) if single_class(last) || single_class(chunk) => {
                last.extend_from_slice(chunk)
            }
            _ => batches.push(chunk.to_vec()),
        }
    }
    batches
}

/// Mean distance between class centroids divided by the mean distance of
/// samples to their own centroid.
pub fn separation_ratio(embeddings: &Matrix, labels: &[usize]) -> Result<f64> {
    let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let d = embeddings.cols();
    let mut centroids = vec![vec![0.0; d]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (row, &c) in embeddings.row_iter().zip(labels) {
        counts[c] += 1;
        for (acc, v) in centroids[c].iter_mut().zip(row) {
            *acc += v;
        }
    }
    let present: Vec<usize> = (0..n_classes).filter(|&c| counts[c] > 0).collect();
    if present.len() < 2 {
        return Err(Error::Degenerate(
            "separation ratio needs at least 2 classes".into(),
        ));
    }
    for &c in &present {
        let inv = 1.0 / counts[c] as f64;
        centroids[c].iter_mut().for_each(|v| *v *= inv);
    }
    let dist = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let intra = embeddings
        .row_iter()
        .zip(labels)
        .map(|(row, &c)| dist(row, &centroids[c]))
        .sum::<f64>()
        / labels.len() as f64;
    let mut inter = 0.0;
    let mut pairs = 0usize;
    for (i, &a) in present.iter().enumerate() {
        for &b in &present[i + 1..] {
            inter += dist(&centroids[a], &centroids[b]);
            pairs += 1;
        }
    }
    inter /= pairs as f64;
    if intra == 0.0 {
        return Err(Error::Degenerate(
            "all samples sit on their class centroids".into(),
        ));
    }
    Ok(inter / intra)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn micro_batches_cover_range() {
        assert_eq!(micro_batches(10, 3), vec![0..4, 4..7, 7..10]);
        assert_eq!(micro_batches(2, 8), vec![0..1, 1..2]);
    }

    #[test]
    fn stratified_batches_mix_classes() {
        let labels: Vec<usize> = (0..103).map(|i| if i < 80 { i % 4 } else { 4 }).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batches = stratified_batches(&labels, 16, &mut rng);
        let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        for b in &batches {
            assert!(
                b.iter().any(|&i| labels[i] != labels[b[0]]),
                "single-class batch {b:?}"
            );
        }
    }

    #[test]
    fn separation_ratio_simple() {
        let e = Matrix::from_rows(&[[0.0, 1.0], [0.0, -1.0], [10.0, 1.0], [10.0, -1.0]]).unwrap();
        assert!((separation_ratio(&e, &[0, 0, 1, 1]).unwrap() - 10.0).abs() < 1e-12);
    }
}
