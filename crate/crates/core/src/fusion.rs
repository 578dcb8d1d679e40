//! Two-system fusion: per-id concatenation of embeddings and averaging of
//! class probabilities.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::dataio::{EmbeddingSet, LogitSet, Manifest, Split};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::system::{
    evaluate_view, EvalConfig, Evaluation, ProbSet, SplitOutputs, System, SystemView, ViewSplit,
};

/// What gets averaged across members.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Mean of the members' softmax probabilities.
    #[default]
    Probability,
    /// Mean of raw logits, then softmax.
    Logit,
}

fn index_of(ids: &[String]) -> HashMap<&str, usize> {
    ids.iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect()
}

/// For every id of `a`, the matching row of `b`; both sets must hold the same ids.
fn match_rows(a: &[String], b: &[String]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::Invalid(format!(
            "id sets differ in size: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let index = index_of(b);
    a.iter()
        .map(|id| {
            index
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Invalid(format!("id {id:?} missing from second system")))
        })
        .collect()
}

/// Per-id `[a ‖ b]`, rows in `a`'s order.
pub fn concat_embeddings(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<EmbeddingSet> {
    let rows = match_rows(a.ids(), b.ids())?;
    let (da, db) = (a.dim(), b.dim());
    let mut data = Vec::with_capacity(a.len() * (da + db));
    for (i, &j) in rows.iter().enumerate() {
        data.extend_from_slice(a.data().row(i));
        data.extend_from_slice(b.data().row(j));
    }
    EmbeddingSet::new(a.ids().to_vec(), Matrix::from_vec(a.len(), da + db, data)?)
}

fn check_vocab(a: &[String], b: &[String]) -> Result<()> {
    if a != b {
        return Err(Error::Incompatible(format!(
            "label vocabularies differ: {a:?} vs {b:?}"
        )));
    }
    Ok(())
}

fn average_rows(a: &Matrix, b: &Matrix, rows: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), a.cols());
    for (i, &j) in rows.iter().enumerate() {
        for ((o, x), y) in out.row_mut(i).iter_mut().zip(a.row(i)).zip(b.row(j)) {
            *o = (x + y) * 0.5;
        }
    }
    out
}

/// Per-id mean of the two members' softmax probabilities, rows in `a`'s order.
pub fn average_probs(a: &LogitSet, b: &LogitSet) -> Result<ProbSet> {
    average_prob_sets(&ProbSet::from_logits(a), &ProbSet::from_logits(b))
}

pub fn average_prob_sets(a: &ProbSet, b: &ProbSet) -> Result<ProbSet> {
    check_vocab(a.labels(), b.labels())?;
    let rows = match_rows(a.ids(), b.ids())?;
    ProbSet::new(
        a.ids().to_vec(),
        a.labels().to_vec(),
        average_rows(a.probs(), b.probs(), &rows),
    )
}

/// Per-id mean of raw logits.
pub fn average_logits(a: &LogitSet, b: &LogitSet) -> Result<LogitSet> {
    check_vocab(a.labels(), b.labels())?;
    let rows = match_rows(a.ids(), b.ids())?;
    LogitSet::new(
        a.ids().to_vec(),
        a.labels().to_vec(),
        average_rows(a.data(), b.data(), &rows),
    )
}

/// A fused pair: the exact in-memory view used for evaluation, and the
/// outputs written to disk. In probability mode the stored logits are
/// log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedSystem {
    pub members: (String, String),
    pub view: SystemView,
    pub outputs: System,
}

pub fn fuse_systems(
    a: &System,
    b: &System,
    names: (&str, &str),
    mode: FusionMode,
) -> Result<FusedSystem> {
    check_vocab(a.labels(), b.labels())?;
    let fuse = |split: Split| -> Result<(ViewSplit, SplitOutputs)> {
        let (sa, sb) = (a.split(split), b.split(split));
        let embeddings = concat_embeddings(&sa.embeddings, &sb.embeddings)?;
        let (probs, logits) = match mode {
            FusionMode::Probability => {
                let probs = average_probs(&sa.logits, &sb.logits)?;
                let logits = probs.to_logit_set()?;
                (probs, logits)
            }
            FusionMode::Logit => {
                let logits = average_logits(&sa.logits, &sb.logits)?;
                (ProbSet::from_logits(&logits), logits)
            }
        };
        Ok((
            ViewSplit {
                embeddings: embeddings.clone(),
                probs,
            },
            SplitOutputs::new(embeddings, logits)?,
        ))
    };
    let (train_v, train_o) = fuse(Split::Train)?;
    let (dev_v, dev_o) = fuse(Split::Dev)?;
    let (eval_v, eval_o) = fuse(Split::Eval)?;
    Ok(FusedSystem {
        members: (names.0.to_owned(), names.1.to_owned()),
        view: SystemView {
            train: train_v,
            dev: dev_v,
            eval: eval_v,
        },
        outputs: System {
            train: train_o,
            dev: dev_o,
            eval: eval_o,
        },
    })
}

/// Fuses two systems, refits the detector on the fused embeddings and
/// evaluates the result.
pub fn fuse_and_evaluate(
    a: &System,
    b: &System,
    manifest: &Manifest,
    mode: FusionMode,
    cfg: &EvalConfig,
) -> Result<(FusedSystem, Evaluation)> {
    let fused = fuse_systems(a, b, ("a", "b"), mode)?;
    let evaluation = evaluate_view(&fused.view, manifest, cfg)?;
    Ok((fused, evaluation))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(ids: &[&str], rows: &[&[f64]]) -> EmbeddingSet {
        EmbeddingSet::new(
            ids.iter().map(|s| s.to_string()).collect(),
            Matrix::from_rows(rows).unwrap(),
        )
        .unwrap()
    }

    fn logits(ids: &[&str], rows: &[&[f64]]) -> LogitSet {
        LogitSet::new(
            ids.iter().map(|s| s.to_string()).collect(),
            vec!["a".into(), "b".into()],
            Matrix::from_rows(rows).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn concat_examples() {
        let a = emb(&["x"], &[&[1.0, 2.0]]);
        assert_eq!(
            concat_embeddings(&a, &a).unwrap().data().as_slice(),
            &[1.0, 2.0, 1.0, 2.0]
        );
        let a = emb(&["x", "y"], &[&[1.0], &[2.0]]);
        let b = emb(&["y", "x"], &[&[20.0], &[10.0]]);
        assert_eq!(
            concat_embeddings(&a, &b).unwrap().data().as_slice(),
            &[1.0, 10.0, 2.0, 20.0]
        );
        let c = emb(&["z", "w"], &[&[1.0], &[2.0]]);
        assert!(concat_embeddings(&a, &c).is_err());
    }

    #[test]
    fn average_examples() {
        let a = logits(&["x"], &[&[40.0, -40.0]]);
        let b = logits(&["x"], &[&[-40.0, 40.0]]);
        let p = average_probs(&a, &b).unwrap();
        assert!((p.probs()[(0, 0)] - 0.5).abs() < 1e-12);
        let self_fused = average_probs(&a, &a).unwrap();
        assert_eq!(self_fused, ProbSet::from_logits(&a));
        let other_vocab = LogitSet::new(
            vec!["x".into()],
            vec!["b".into(), "a".into()],
            Matrix::from_rows(&[[0.0, 1.0]]).unwrap(),
        )
        .unwrap();
        assert!(matches!(
            average_probs(&a, &other_vocab),
            Err(Error::Incompatible(_))
        ));
    }
}
