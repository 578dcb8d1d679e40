//! Exported system outputs and their evaluation.
//!
//! A system directory holds `{train,dev,eval}.steb` embeddings and
//! `{train,dev,eval}.stlg` logits. Evaluation joins them with the manifest,
//! fits the novelty detector on train/dev and reports in-domain and OOD
//! metrics on eval.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{
    read_embeddings, read_logits, write_embeddings, write_logits, EmbeddingSet, LogitSet, Manifest,
    Split,
};
use crate::error::{Error, Result};
use crate::linalg::{estimate_moments, Matrix};
use crate::losses::softmax;
use crate::metrics::{eer, frechet_distance, EceConfig, MetricReport, PredictionBatch};
use crate::ood::{decide, fit_threshold, nsd_scores, NsdModel, OodDecision, Scaling};

/// Embeddings and logits of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitOutputs {
    pub embeddings: EmbeddingSet,
    pub logits: LogitSet,
}

impl SplitOutputs {
    pub fn new(embeddings: EmbeddingSet, logits: LogitSet) -> Result<Self> {
        if embeddings.ids() != logits.ids() {
            return Err(Error::Incompatible(
                "embedding and logit ids are not aligned".into(),
            ));
        }
        Ok(SplitOutputs { embeddings, logits })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct System {
    pub train: SplitOutputs,
    pub dev: SplitOutputs,
    pub eval: SplitOutputs,
}

impl System {
    pub fn split(&self, split: Split) -> &SplitOutputs {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Eval => &self.eval,
        }
    }

    pub fn labels(&self) -> &[String] {
        self.train.logits.labels()
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let load = |split: Split| -> Result<SplitOutputs> {
            let emb = dir.join(format!("{}.steb", split.as_str()));
            let logits = dir.join(format!("{}.stlg", split.as_str()));
            for p in [&emb, &logits] {
                if !p.is_file() {
                    return Err(Error::Invalid(format!(
                        "missing split file {}",
                        p.display()
                    )));
                }
            }
            SplitOutputs::new(read_embeddings(emb)?, read_logits(logits)?)
        };
        let system = System {
            train: load(Split::Train)?,
            dev: load(Split::Dev)?,
            eval: load(Split::Eval)?,
        };
        for s in [&system.dev, &system.eval] {
            if s.logits.labels() != system.labels() {
                return Err(Error::Incompatible(
                    "label vocabularies differ between splits".into(),
                ));
            }
        }
        Ok(system)
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for split in Split::ALL {
            let s = self.split(split);
            write_embeddings(dir.join(format!("{}.steb", split.as_str())), &s.embeddings)?;
            write_logits(dir.join(format!("{}.stlg", split.as_str())), &s.logits)?;
        }
        Ok(())
    }
}

/// Row-aligned class probabilities over a label vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbSet {
    ids: Vec<String>,
    labels: Vec<String>,
    probs: Matrix,
}

impl ProbSet {
    pub fn new(ids: Vec<String>, labels: Vec<String>, probs: Matrix) -> Result<Self> {
        if ids.len() != probs.rows() || labels.len() != probs.cols() {
            return Err(Error::Shape(format!(
                "{}×{} probabilities for {} ids and {} labels",
                probs.rows(),
                probs.cols(),
                ids.len(),
                labels.len()
            )));
        }
        for (i, row) in probs.row_iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Invalid(format!(
                    "row {i} is not a probability distribution"
                )));
            }
        }
        Ok(ProbSet { ids, labels, probs })
    }

    pub fn from_logits(logits: &LogitSet) -> Self {
        let mut probs = Matrix::zeros(logits.len(), logits.labels().len());
        for (i, row) in logits.data().row_iter().enumerate() {
            probs.row_mut(i).copy_from_slice(&softmax(row));
        }
        ProbSet {
            ids: logits.ids().to_vec(),
            labels: logits.labels().to_vec(),
            probs,
        }
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Rows for `ids`, in that order.
    pub fn select(&self, ids: &[String]) -> Result<ProbSet> {
        let index: std::collections::HashMap<&str, usize> = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let mut probs = Matrix::zeros(ids.len(), self.labels.len());
        for (r, id) in ids.iter().enumerate() {
            let &src = index
                .get(id.as_str())
                .ok_or_else(|| Error::Invalid(format!("id {id:?} not found")))?;
            probs.row_mut(r).copy_from_slice(self.probs.row(src));
        }
        Ok(ProbSet {
            ids: ids.to_vec(),
            labels: self.labels.clone(),
            probs,
        })
    }

    /// Log-probabilities as a logit set (softmax of the result gives the
    /// probabilities back up to the floor of 1e-30).
    pub fn to_logit_set(&self) -> Result<LogitSet> {
        let data = self
            .probs
            .as_slice()
            .iter()
            .map(|p| p.max(1e-30).ln())
            .collect();
        LogitSet::new(
            self.ids.clone(),
            self.labels.clone(),
            Matrix::from_vec(self.probs.rows(), self.probs.cols(), data)?,
        )
    }
}

/// Embeddings and probabilities of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSplit {
    pub embeddings: EmbeddingSet,
    pub probs: ProbSet,
}

/// What evaluation consumes: per split embeddings plus class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemView {
    pub train: ViewSplit,
    pub dev: ViewSplit,
    pub eval: ViewSplit,
}

impl SystemView {
    pub fn split(&self, split: Split) -> &ViewSplit {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Eval => &self.eval,
        }
    }

    pub fn labels(&self) -> &[String] {
        self.train.probs.labels()
    }
}

impl From<&System> for SystemView {
    fn from(s: &System) -> Self {
        let view = |o: &SplitOutputs| ViewSplit {
            embeddings: o.embeddings.clone(),
            probs: ProbSet::from_logits(&o.logits),
        };
        SystemView {
            train: view(&s.train),
            dev: view(&s.dev),
            eval: view(&s.eval),
        }
    }
}

/// Detector settings. `tau` overrides the dev-fitted threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NsdConfig {
    pub k: usize,
    pub scaling: Scaling,
    pub tau: Option<f64>,
}

impl Default for NsdConfig {
    fn default() -> Self {
        NsdConfig {
            k: 1,
            scaling: Scaling::MaxSoftmax,
            tau: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub nsd: NsdConfig,
    pub ece: EceConfig,
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            nsd: NsdConfig::default(),
            ece: EceConfig::default(),
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub in_domain: MetricReport,
    /// Present when the eval split has OOD rows.
    pub ood: Option<MetricReport>,
    pub detector: NsdModel,
    pub decisions: Vec<OodDecision>,
    pub flagged_fraction: f64,
}

struct Rows {
    ids: Vec<String>,
    is_ood: Vec<bool>,
    class: Vec<Option<usize>>,
}

fn manifest_rows(manifest: &Manifest, split: Split) -> Result<Rows> {
    let records: Vec<_> = manifest.split(split).collect();
    if records.is_empty() {
        return Err(Error::Degenerate(format!(
            "manifest has no {} rows",
            split.as_str()
        )));
    }
    Ok(Rows {
        ids: records.iter().map(|r| r.id.clone()).collect(),
        is_ood: records.iter().map(|r| r.is_ood).collect(),
        class: records
            .iter()
            .map(|r| {
                if r.is_ood {
                    None
                } else {
                    manifest.class_index(&r.label)
                }
            })
            .collect(),
    })
}

fn check_vocabulary(view: &SystemView, manifest: &Manifest) -> Result<()> {
    for split in Split::ALL {
        if view.split(split).probs.labels() != manifest.known_labels() {
            return Err(Error::Incompatible(format!(
                "{} labels {:?} differ from manifest train labels {:?}",
                split.as_str(),
                view.split(split).probs.labels(),
                manifest.known_labels()
            )));
        }
    }
    Ok(())
}

fn scaled_scores(
    view: &ViewSplit,
    ids: &[String],
    model: &NsdModel,
    threads: usize,
) -> Result<(Vec<f64>, ProbSet)> {
    let emb = view.embeddings.select(ids)?;
    let probs = view.probs.select(ids)?;
    let raw = nsd_scores(emb.data(), model, threads)?;
    let scaled = raw
        .iter()
        .zip(probs.probs().row_iter())
        .map(|(&r, p)| model.scaling().apply(r, p))
        .collect();
    Ok((scaled, probs))
}

/// Fits the detector: train embeddings as references, threshold on dev.
pub fn fit_detector(
    view: &SystemView,
    manifest: &Manifest,
    cfg: &NsdConfig,
    threads: usize,
) -> Result<NsdModel> {
    check_vocabulary(view, manifest)?;
    let train = manifest_rows(manifest, Split::Train)?;
    let refs = view.train.embeddings.select(&train.ids)?;
    // all-zero rows (dead ReLU outputs) have no direction to compare against
    let live: Vec<usize> = (0..refs.len())
        .filter(|&i| refs.data().row(i).iter().any(|&v| v != 0.0))
        .collect();
    if live.len() < refs.len() {
        log::warn!(
            "dropping {} zero-norm reference embeddings",
            refs.len() - live.len()
        );
    }
    let rows: Vec<&[f64]> = live.iter().map(|&i| refs.data().row(i)).collect();
    let classes = live
        .iter()
        .map(|&i| train.class[i].expect("train rows are in-domain"))
        .collect();
    let model = NsdModel::new(
        Matrix::from_rows(&rows)?,
        classes,
        manifest.known_labels().to_vec(),
        cfg.k,
        cfg.scaling,
        0.0,
    )?;
    if let Some(tau) = cfg.tau {
        return model.with_tau(tau);
    }
    let dev = manifest_rows(manifest, Split::Dev)?;
    let (scores, _) = scaled_scores(&view.dev, &dev.ids, &model, threads)?;
    let tau = fit_threshold(&scores, Some(&dev.is_ood))?;
    model.with_tau(tau)
}

/// Full evaluation of one system (or fused pair) against the manifest.
pub fn evaluate_view(
    view: &SystemView,
    manifest: &Manifest,
    cfg: &EvalConfig,
) -> Result<Evaluation> {
    let detector = fit_detector(view, manifest, &cfg.nsd, cfg.threads)?;
    let rows = manifest_rows(manifest, Split::Eval)?;
    let k = manifest.known_labels().len();
    let eval_emb = view.eval.embeddings.select(&rows.ids)?;
    let raw = nsd_scores(eval_emb.data(), &detector, cfg.threads)?;
    let probs = view.eval.probs.select(&rows.ids)?;
    let decisions = decide(&rows.ids, &raw, probs.probs(), &detector)?;

    let in_rows: Vec<usize> = (0..rows.ids.len()).filter(|&i| !rows.is_ood[i]).collect();
    let ood_rows: Vec<usize> = (0..rows.ids.len()).filter(|&i| rows.is_ood[i]).collect();
    if in_rows.is_empty() {
        return Err(Error::Degenerate("eval split has no in-domain rows".into()));
    }

    let frechet = if ood_rows.len() >= 2 && in_rows.len() >= 2 {
        let moments = |idx: &[usize]| {
            let mut m = Matrix::zeros(idx.len(), eval_emb.dim());
            for (r, &i) in idx.iter().enumerate() {
                m.row_mut(r).copy_from_slice(eval_emb.data().row(i));
            }
            estimate_moments(&m)
        };
        Some(frechet_distance(&moments(&in_rows)?, &moments(&ood_rows)?)?)
    } else {
        None
    };

    let mut in_probs = Matrix::zeros(in_rows.len(), k);
    for (r, &i) in in_rows.iter().enumerate() {
        in_probs.row_mut(r).copy_from_slice(probs.probs().row(i));
    }
    let in_truth = in_rows
        .iter()
        .map(|&i| rows.class[i].expect("in-domain row"))
        .collect();
    let mut in_domain =
        MetricReport::from_batch(&PredictionBatch::new(in_probs, in_truth)?, cfg.ece)?;
    in_domain.frechet = frechet;

    let ood = if ood_rows.is_empty() {
        None
    } else {
        // Known classes plus a trailing "unknown" class; flagged samples
        // predict unknown with certainty.
        let mut p = Matrix::zeros(rows.ids.len(), k + 1);
        for (i, d) in decisions.iter().enumerate() {
            if d.is_novel {
                p[(i, k)] = 1.0;
            } else {
                p.row_mut(i)[..k].copy_from_slice(probs.probs().row(i));
            }
        }
        let truth = rows.class.iter().map(|c| c.unwrap_or(k)).collect();
        let mut report = MetricReport::from_batch(&PredictionBatch::new(p, truth)?, cfg.ece)?;
        let scores: Vec<f64> = decisions.iter().map(|d| d.score).collect();
        let known: Vec<bool> = rows.is_ood.iter().map(|&o| !o).collect();
        report.eer = Some(eer(&scores, &known)?);
        report.frechet = frechet;
        Some(report)
    };

    let flagged = decisions.iter().filter(|d| d.is_novel).count();
    let flagged_fraction = flagged as f64 / decisions.len() as f64;
    Ok(Evaluation {
        in_domain,
        ood,
        detector,
        decisions,
        flagged_fraction,
    })
}

pub fn evaluate_system(
    system: &System,
    manifest: &Manifest,
    cfg: &EvalConfig,
) -> Result<Evaluation> {
    evaluate_view(&SystemView::from(system), manifest, cfg)
}
