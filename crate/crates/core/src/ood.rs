//! Novel-source detection by cosine similarity to training embeddings.
//!
//! Every training embedding counts as "known". A test sample's raw score is
//! the mean of its top-k cosine similarities to those references; the score
//! is then weighted by classifier confidence and compared with a threshold
//! fitted on the dev split. Samples scoring below the threshold are novel.
//!
//! Fitted detectors are stored as little-endian `STND` files:
//!
//! ```text
//! "STND" | u32 version=1 | u32 k | u8 scaling | f64 τ | u32 N | u32 D
//!        | N·D f64 references | N × u32 class index | labels
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{
    put_count, put_strings, put_u32, EmbeddingSet, LogitSet, Reader, FORMAT_VERSION,
};
use crate::error::{Error, Result};
use crate::linalg::{pairwise_dot, Matrix};
use crate::losses::softmax;
use crate::metrics::{argmax, eer_operating_point};

pub const NSD_MAGIC: &[u8; 4] = b"STND";
/// Percentile of known dev scores used as threshold when the dev split has no OOD flags.
pub const FALLBACK_PERCENTILE: f64 = 5.0;
/// Class name reported for samples flagged as novel.
pub const UNKNOWN: &str = "unknown";

/// How the raw similarity is weighted by classifier confidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scaling {
    /// Raw similarity, unweighted.
    None,
    /// Raw similarity times the maximum softmax probability.
    #[default]
    MaxSoftmax,
}

impl Scaling {
    fn code(self) -> u8 {
        match self {
            Scaling::None => 0,
            Scaling::MaxSoftmax => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Scaling::None),
            1 => Some(Scaling::MaxSoftmax),
            _ => None,
        }
    }

    /// Applies the scaling given the sample's class probabilities.
    pub fn apply(self, raw: f64, probs: &[f64]) -> f64 {
        match self {
            Scaling::None => raw,
            Scaling::MaxSoftmax => raw * probs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// `raw × max softmax(logits)`.
pub fn confidence_scale(raw: f64, logits: &[f64]) -> f64 {
    Scaling::MaxSoftmax.apply(raw, &softmax(logits))
}

/// A fitted detector: reference embeddings with their class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct NsdModel {
    references: Matrix,
    sq_norms: Vec<f64>,
    classes: Vec<usize>,
    labels: Vec<String>,
    k: usize,
    scaling: Scaling,
    tau: f64,
}

impl NsdModel {
    pub fn new(
        references: Matrix,
        classes: Vec<usize>,
        labels: Vec<String>,
        k: usize,
        scaling: Scaling,
        tau: f64,
    ) -> Result<Self> {
        if references.rows() == 0 || references.cols() == 0 {
            return Err(Error::Degenerate("reference set is empty".into()));
        }
        if classes.len() != references.rows() {
            return Err(Error::Shape(format!(
                "{} class indices for {} references",
                classes.len(),
                references.rows()
            )));
        }
        if let Some(&c) = classes.iter().find(|&&c| c >= labels.len()) {
            return Err(Error::Invalid(format!(
                "class index {c} outside {} labels",
                labels.len()
            )));
        }
        if k == 0 || k > references.rows() {
            return Err(Error::Config(format!(
                "k must be in 1..={}, got {k}",
                references.rows()
            )));
        }
        if !tau.is_finite() {
            return Err(Error::Invalid(format!(
                "threshold must be finite, got {tau}"
            )));
        }
        let sq_norms: Vec<f64> = references.row_iter().map(|r| pairwise_dot(r, r)).collect();
        if let Some(i) = sq_norms.iter().position(|&n| n == 0.0) {
            return Err(Error::Degenerate(format!(
                "reference row {i} has zero norm"
            )));
        }
        Ok(NsdModel {
            references,
            sq_norms,
            classes,
            labels,
            k,
            scaling,
            tau,
        })
    }

    pub fn references(&self) -> &Matrix {
        &self.references
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn scaling(&self) -> Scaling {
        self.scaling
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn dim(&self) -> usize {
        self.references.cols()
    }

    pub fn with_tau(mut self, tau: f64) -> Result<Self> {
        if !tau.is_finite() {
            return Err(Error::Invalid(format!(
                "threshold must be finite, got {tau}"
            )));
        }
        self.tau = tau;
        Ok(self)
    }

    pub fn with_k(mut self, k: usize) -> Result<Self> {
        if k == 0 || k > self.references.rows() {
            return Err(Error::Config(format!(
                "k must be in 1..={}, got {k}",
                self.references.rows()
            )));
        }
        self.k = k;
        Ok(self)
    }

    /// Reference rows belonging to class `c`.
    pub fn class_rows(&self, c: usize) -> Vec<usize> {
        (0..self.classes.len())
            .filter(|&i| self.classes[i] == c)
            .collect()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::with_capacity(32 + self.references.as_slice().len() * 8);
        buf.extend_from_slice(NSD_MAGIC);
        put_u32(&mut buf, FORMAT_VERSION);
        put_count(&mut buf, self.k, "k")?;
        buf.push(self.scaling.code());
        buf.extend_from_slice(&self.tau.to_le_bytes());
        put_count(&mut buf, self.references.rows(), "reference count")?;
        put_count(&mut buf, self.references.cols(), "dimension")?;
        for v in self.references.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &c in &self.classes {
            put_count(&mut buf, c, "class index")?;
        }
        put_strings(&mut buf, &self.labels)?;
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(NSD_MAGIC)?;
        r.version()?;
        let at = r.pos();
        let k = r.u32("k")? as usize;
        let scaling_at = r.pos();
        let scaling = Scaling::from_code(r.u8("scaling")?)
            .ok_or_else(|| Error::format(scaling_at, "unknown scaling code"))?;
        let tau = r.f64("threshold")?;
        let rows = r.u32("reference count")? as usize;
        let dims_at = r.pos();
        let cols = r.u32("dimension")? as usize;
        if rows == 0 || cols == 0 {
            return Err(Error::format(dims_at, "empty reference set"));
        }
        if k == 0 || k > rows {
            return Err(Error::format(at, format!("k = {k} outside 1..={rows}")));
        }
        let count = rows
            .checked_mul(cols)
            .filter(|c| c.checked_mul(8).is_some())
            .ok_or_else(|| Error::format(dims_at, "reference block size overflows"))?;
        if count * 8 > bytes.len() - r.pos() {
            return Err(Error::format(
                bytes.len(),
                format!("truncated references: {rows}×{cols} declared"),
            ));
        }
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(r.f64("reference value")?);
        }
        let mut classes = Vec::with_capacity(rows);
        for _ in 0..rows {
            classes.push(r.u32("class index")? as usize);
        }
        let labels_at = r.pos();
        let labels = r.strings("label")?;
        r.finish()?;
        let references = Matrix::from_vec(rows, cols, data)?;
        NsdModel::new(references, classes, labels, k, scaling, tau).map_err(|e| match e {
            Error::Format { .. } => e,
            other => Error::format(labels_at, other.to_string()),
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

/// Cosine similarity as `a·b / √(|a|²|b|²)`.
///
/// With midpoint-split summation, duplicating both vectors doubles every
/// term exactly, so scores of self-concatenated embeddings are unchanged.
fn cosine(a: &[f64], sq_a: f64, b: &[f64], sq_b: f64) -> f64 {
    (pairwise_dot(a, b) / (sq_a * sq_b).sqrt()).clamp(-1.0, 1.0)
}

/// Mean of the top-k cosine similarities between `embedding` and the references.
pub fn nsd_similarity(embedding: &[f64], model: &NsdModel) -> Result<f64> {
    if embedding.len() != model.dim() {
        return Err(Error::Shape(format!(
            "embedding of dimension {} against references of dimension {}",
            embedding.len(),
            model.dim()
        )));
    }
    let sq = pairwise_dot(embedding, embedding);
    if sq == 0.0 || !sq.is_finite() {
        return Err(Error::Degenerate(
            "cannot score a zero-norm embedding".into(),
        ));
    }
    let mut sims: Vec<f64> = model
        .references
        .row_iter()
        .zip(&model.sq_norms)
        .map(|(r, &n)| cosine(embedding, sq, r, n))
        .collect();
    let k = model.k;
    if k < sims.len() {
        sims.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
        sims.truncate(k);
    }
    sims.sort_by(|a, b| b.total_cmp(a));
    Ok(sims.iter().sum::<f64>() / k as f64)
}

/// Raw scores of every row, computed on up to `threads` workers. Results do
/// not depend on the thread count.
pub fn nsd_scores(embeddings: &Matrix, model: &NsdModel, threads: usize) -> Result<Vec<f64>> {
    let n = embeddings.rows();
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return embeddings
            .row_iter()
            .map(|r| nsd_similarity(r, model))
            .collect();
    }
    let chunk = n.div_ceil(threads);
    let parts: Vec<Result<Vec<f64>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|start| {
                let end = (start + chunk).min(n);
                s.spawn(move || {
                    (start..end)
                        .map(|i| nsd_similarity(embeddings.row(i), model))
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("scoring worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(n);
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

/// Linear-interpolation percentile (`q` in 0..=100) of a non-empty sample.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Degenerate("percentile of an empty sample".into()));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::Invalid(format!("percentile {q} outside [0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        return Ok(sorted[lo]);
    }
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Decision threshold from dev scores.
///
/// With OOD flags, the threshold sits midway between the two operating
/// points bracketing the equal-error point (known samples are the accepted
/// class). Without flags, it is the 5th percentile of the dev scores.
pub fn fit_threshold(dev_scores: &[f64], dev_is_ood: Option<&[bool]>) -> Result<f64> {
    if dev_scores.is_empty() {
        return Err(Error::Degenerate(
            "cannot fit a threshold on an empty dev set".into(),
        ));
    }
    if dev_scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Invalid("non-finite dev score".into()));
    }
    match dev_is_ood {
        Some(flags) if flags.iter().any(|&f| f) => {
            let known: Vec<bool> = flags.iter().map(|&f| !f).collect();
            let point = eer_operating_point(dev_scores, &known)?;
            if point.upper.is_finite() {
                Ok(0.5 * (point.lower + point.upper))
            } else {
                Ok(point.lower)
            }
        }
        Some(flags) if flags.len() != dev_scores.len() => Err(Error::Shape(format!(
            "{} dev scores for {} flags",
            dev_scores.len(),
            flags.len()
        ))),
        _ => percentile(dev_scores, FALLBACK_PERCENTILE),
    }
}

/// Per-sample detector output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodDecision {
    pub id: String,
    pub raw: f64,
    pub score: f64,
    pub is_novel: bool,
    /// Known class label, or [`UNKNOWN`] when novel.
    pub predicted: String,
}

/// Scores, thresholds and labels samples given class probabilities.
pub fn decide(
    ids: &[String],
    raw: &[f64],
    probs: &Matrix,
    model: &NsdModel,
) -> Result<Vec<OodDecision>> {
    if ids.len() != raw.len() || probs.rows() != raw.len() {
        return Err(Error::Shape(
            "ids, scores and probabilities are not aligned".into(),
        ));
    }
    if probs.cols() != model.labels.len() {
        return Err(Error::Shape(format!(
            "{} probability columns for {} labels",
            probs.cols(),
            model.labels.len()
        )));
    }
    Ok(ids
        .iter()
        .zip(raw)
        .zip(probs.row_iter())
        .map(|((id, &raw), p)| {
            let score = model.scaling.apply(raw, p);
            let is_novel = score < model.tau;
            let predicted = if is_novel {
                UNKNOWN.to_owned()
            } else {
                model.labels[argmax(p)].clone()
            };
            OodDecision {
                id: id.clone(),
                raw,
                score,
                is_novel,
                predicted,
            }
        })
        .collect())
}

/// Classifies test samples; embeddings and logits must list the same ids in
/// the same order, and the logit vocabulary must match the detector's.
pub fn classify(
    embeddings: &EmbeddingSet,
    logits: &LogitSet,
    model: &NsdModel,
    threads: usize,
) -> Result<Vec<OodDecision>> {
    if embeddings.ids() != logits.ids() {
        return Err(Error::Incompatible(
            "embedding and logit ids are not aligned".into(),
        ));
    }
    if logits.labels() != model.labels() {
        return Err(Error::Incompatible(
            "logit labels differ from the detector's labels".into(),
        ));
    }
    let raw = nsd_scores(embeddings.data(), model, threads)?;
    let mut probs = Matrix::zeros(logits.len(), model.labels.len());
    for (i, row) in logits.data().row_iter().enumerate() {
        probs.row_mut(i).copy_from_slice(&softmax(row));
    }
    decide(embeddings.ids(), &raw, &probs, model)
}
