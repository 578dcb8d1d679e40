//! Dataset directories and the training/export pipeline built on them.
//!
//! ```text
//! <dir>/manifest.jsonl
//! <dir>/features/{train,dev,eval}.steb      rows for the manifest ids of that split
//! <dir>/features/real_{train,dev}.steb      bona fide samples (real-emphasis stage only)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataio::{
    load_manifest, read_embeddings, write_embeddings, EmbeddingSet, LogitSet, Manifest, Split,
};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng;
use crate::system::{SplitOutputs, System};
use crate::trainer::{
    separation_ratio, train_fd, train_re, Checkpoint, FdSettings, LabeledData, MlpModel, StageData,
    StageResult, FAKE, REAL,
};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
/// Output labels of the real-emphasis head.
pub const RE_LABELS: [&str; 2] = ["bonafide", "spoof"];

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: EmbeddingSet,
    pub dev: EmbeddingSet,
    pub eval: EmbeddingSet,
    pub real_train: Option<EmbeddingSet>,
    pub real_dev: Option<EmbeddingSet>,
}

impl Dataset {
    pub fn new(
        manifest: Manifest,
        train: EmbeddingSet,
        dev: EmbeddingSet,
        eval: EmbeddingSet,
        real_train: Option<EmbeddingSet>,
        real_dev: Option<EmbeddingSet>,
    ) -> Result<Self> {
        let dim = train.dim();
        let ds = Dataset {
            manifest,
            train,
            dev,
            eval,
            real_train,
            real_dev,
        };
        for split in Split::ALL {
            let set = ds.features(split);
            if set.dim() != dim {
                return Err(Error::Shape(format!(
                    "{} features have dimension {}, train has {dim}",
                    split.as_str(),
                    set.dim()
                )));
            }
            let ids: Vec<String> = ds.manifest.split(split).map(|r| r.id.clone()).collect();
            // every manifest id must have a feature row
            set.select(&ids)?;
        }
        for set in [&ds.real_train, &ds.real_dev].into_iter().flatten() {
            if set.dim() != dim {
                return Err(Error::Shape(format!(
                    "bona fide features have dimension {}, train has {dim}",
                    set.dim()
                )));
            }
        }
        Ok(ds)
    }

    pub fn features(&self, split: Split) -> &EmbeddingSet {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Eval => &self.eval,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.train.dim()
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = load_manifest(dir.join(MANIFEST_FILE))?;
        let feat = dir.join("features");
        let optional = |name: &str| -> Result<Option<EmbeddingSet>> {
            let p = feat.join(name);
            if p.is_file() {
                Ok(Some(read_embeddings(p)?))
            } else {
                Ok(None)
            }
        };
        Dataset::new(
            manifest,
            read_embeddings(feat.join("train.steb"))?,
            read_embeddings(feat.join("dev.steb"))?,
            read_embeddings(feat.join("eval.steb"))?,
            optional("real_train.steb")?,
            optional("real_dev.steb")?,
        )
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let feat = dir.join("features");
        std::fs::create_dir_all(&feat)?;
        std::fs::write(dir.join(MANIFEST_FILE), self.manifest.to_jsonl())?;
        write_embeddings(feat.join("train.steb"), &self.train)?;
        write_embeddings(feat.join("dev.steb"), &self.dev)?;
        write_embeddings(feat.join("eval.steb"), &self.eval)?;
        if let Some(r) = &self.real_train {
            write_embeddings(feat.join("real_train.steb"), r)?;
        }
        if let Some(r) = &self.real_dev {
            write_embeddings(feat.join("real_dev.steb"), r)?;
        }
        Ok(())
    }

    /// In-domain rows of `split` with class indices over the known labels.
    pub fn labeled(&self, split: Split) -> Result<LabeledData> {
        let records: Vec<_> = self.manifest.split(split).filter(|r| !r.is_ood).collect();
        let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
        let y = records
            .iter()
            .map(|r| {
                self.manifest
                    .class_index(&r.label)
                    .expect("validated manifest")
            })
            .collect();
        LabeledData::new(self.features(split).select(&ids)?.data().clone(), y)
    }

    /// Source-classification data for the dispersion stage.
    pub fn fd_data(&self) -> Result<StageData> {
        Ok(StageData {
            train: self.labeled(Split::Train)?,
            dev: self.labeled(Split::Dev)?,
        })
    }

    /// Bona fide vs spoof data for the real-emphasis stage.
    pub fn re_data(&self) -> Result<StageData> {
        let (Some(real_train), Some(real_dev)) = (&self.real_train, &self.real_dev) else {
            return Err(Error::Invalid(
                "real-emphasis training needs features/real_train.steb and real_dev.steb".into(),
            ));
        };
        let binary = |real: &EmbeddingSet, fake: LabeledData| -> Result<LabeledData> {
            let mut data = real.data().as_slice().to_vec();
            data.extend_from_slice(fake.x.as_slice());
            let mut y = vec![REAL; real.len()];
            y.extend(std::iter::repeat_n(FAKE, fake.len()));
            LabeledData::new(Matrix::from_vec(y.len(), real.dim(), data)?, y)
        };
        Ok(StageData {
            train: binary(real_train, self.labeled(Split::Train)?)?,
            dev: binary(real_dev, self.labeled(Split::Dev)?)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Re,
    Fd,
    TwoStage,
    FdOnly,
}

/// Results of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub re: Option<(StageResult, Checkpoint)>,
    pub fd: Option<(StageResult, Checkpoint)>,
    /// Inter/intra centroid distance ratio of dev embeddings before and
    /// after the dispersion stage.
    pub separation: Option<(f64, f64)>,
}

fn layer_sizes(cfg: &RunConfig, input_dim: usize, n_out: usize) -> Vec<usize> {
    let mut sizes = vec![input_dim];
    sizes.extend(&cfg.model.hidden);
    sizes.push(cfg.model.embedding_dim);
    sizes.push(n_out);
    sizes
}

fn check_resume(ckpt: &Checkpoint, expected: &[usize], compare_head: bool) -> Result<()> {
    let got = ckpt.model.sizes();
    let n = if compare_head {
        expected.len()
    } else {
        expected.len() - 1
    };
    if got.len() != expected.len() || got[..n] != expected[..n] {
        return Err(Error::Incompatible(format!(
            "checkpoint size list {got:?} does not match configured {expected:?}"
        )));
    }
    Ok(())
}

fn run_re(ds: &Dataset, cfg: &RunConfig, start: MlpModel) -> Result<(StageResult, Checkpoint)> {
    let data = ds.re_data()?;
    let mut rng = rng::stream(cfg.seed, "oc-direction");
    let direction: Vec<f64> = (0..cfg.model.embedding_dim)
        .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng))
        .collect();
    let oc = cfg.oc_softmax.params(direction)?;
    let result = train_re(&start, &oc, &data, &cfg.stage(&cfg.re))?;
    let ckpt = Checkpoint::new(
        result.model.clone(),
        RE_LABELS.iter().map(|s| s.to_string()).collect(),
    )?;
    Ok((result, ckpt))
}

fn run_fd(
    ds: &Dataset,
    cfg: &RunConfig,
    start: MlpModel,
) -> Result<(StageResult, Checkpoint, (f64, f64))> {
    let data = ds.fd_data()?;
    let settings = FdSettings {
        schedule: cfg.schedule,
        mixup: cfg.mixup,
        normalize: cfg.npair.normalize,
    };
    let before = separation_ratio(start.forward(&data.dev.x)?.embeddings(), &data.dev.y)?;
    let result = train_fd(&start, &data, &settings, &cfg.stage(&cfg.fd))?;
    let after = separation_ratio(result.model.forward(&data.dev.x)?.embeddings(), &data.dev.y)?;
    let ckpt = Checkpoint::new(result.model.clone(), ds.manifest.known_labels().to_vec())?;
    Ok((result, ckpt, (before, after)))
}

/// Runs `stage`. `resume` seeds the starting weights; for the `fd` stage it
/// is required and its head is replaced when it is not already a source head.
pub fn train(
    ds: &Dataset,
    cfg: &RunConfig,
    stage: Stage,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let k = ds.manifest.known_labels().len();
    let re_sizes = layer_sizes(cfg, ds.input_dim(), 2);
    let fd_sizes = layer_sizes(cfg, ds.input_dim(), k);
    let mut init_rng = rng::stream(cfg.seed, "init");
    let mut head_rng = rng::stream(cfg.seed, "head");
    let scale = cfg.model.head_init_scale;

    let swap_head = |model: &MlpModel, rng: &mut rng::StreamRng| -> Result<MlpModel> {
        if model.n_outputs() == k && model.sizes() == fd_sizes.as_slice() {
            Ok(model.clone())
        } else {
            model.with_new_head(k, scale, rng)
        }
    };

    let mut outcome = TrainOutcome {
        re: None,
        fd: None,
        separation: None,
    };
    match stage {
        Stage::Re | Stage::TwoStage => {
            let start = match resume {
                Some(c) => {
                    check_resume(c, &re_sizes, true)?;
                    c.model.clone()
                }
                None => MlpModel::init(&re_sizes, &mut init_rng)?,
            };
            let (re, ckpt) = run_re(ds, cfg, start)?;
            if stage == Stage::TwoStage {
                let start = swap_head(&ckpt.model, &mut head_rng)?;
                let (fd, fd_ckpt, sep) = run_fd(ds, cfg, start)?;
                outcome.fd = Some((fd, fd_ckpt));
                outcome.separation = Some(sep);
            }
            outcome.re = Some((re, ckpt));
        }
        Stage::Fd => {
            let c = resume.ok_or_else(|| {
                Error::Invalid(
                    "the fd stage starts from a checkpoint; pass one to resume from".into(),
                )
            })?;
            check_resume(c, &fd_sizes, false)?;
            let start = swap_head(&c.model, &mut head_rng)?;
            let (fd, ckpt, sep) = run_fd(ds, cfg, start)?;
            outcome.fd = Some((fd, ckpt));
            outcome.separation = Some(sep);
        }
        Stage::FdOnly => {
            let start = match resume {
                Some(c) => {
                    check_resume(c, &fd_sizes, true)?;
                    c.model.clone()
                }
                None => MlpModel::init(&fd_sizes, &mut init_rng)?,
            };
            let (fd, ckpt, sep) = run_fd(ds, cfg, start)?;
            outcome.fd = Some((fd, ckpt));
            outcome.separation = Some(sep);
        }
    }
    Ok(outcome)
}

/// Embeddings and logits of every feature row, per split.
pub fn export(ckpt: &Checkpoint, ds: &Dataset) -> Result<System> {
    if ckpt.model.input_dim() != ds.input_dim() {
        return Err(Error::Incompatible(format!(
            "checkpoint expects {} input features, dataset has {}",
            ckpt.model.input_dim(),
            ds.input_dim()
        )));
    }
    let run = |set: &EmbeddingSet| -> Result<SplitOutputs> {
        let fwd = ckpt.model.forward(set.data())?;
        SplitOutputs::new(
            EmbeddingSet::new(set.ids().to_vec(), fwd.embeddings().clone())?,
            LogitSet::new(set.ids().to_vec(), ckpt.labels.clone(), fwd.logits)?,
        )
    };
    Ok(System {
        train: run(&ds.train)?,
        dev: run(&ds.dev)?,
        eval: run(&ds.eval)?,
    })
}
