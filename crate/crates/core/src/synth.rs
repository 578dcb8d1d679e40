//! Seeded synthetic source-tracing dataset.
//!
//! Every fake source is a Gaussian cluster around a shared "fake" offset
//! plus a source-specific direction; bona fide samples cluster around the
//! origin. All samples also carry a class-independent nuisance component
//! drawn from a fixed low-rank subspace. OOD sources are built the same way
//! but appear only in dev and eval.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::{EmbeddingSet, Manifest, ManifestRecord, Split};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::pipeline::Dataset;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub k_sources: usize,
    pub ood_sources: usize,
    pub dim: usize,
    /// Samples per source in train, dev and eval.
    pub n_train: usize,
    pub n_dev: usize,
    pub n_eval: usize,
    /// Bona fide samples in train and dev.
    pub n_real_train: usize,
    pub n_real_dev: usize,
    /// Length of the shared fake offset.
    pub fake_offset: f64,
    /// Length of each source's own offset.
    pub spread: f64,
    /// Same, for OOD sources.
    pub ood_spread: f64,
    /// Isotropic noise standard deviation.
    pub noise: f64,
    /// Rank and scale of the shared nuisance subspace.
    pub nuisance_rank: usize,
    pub nuisance_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            k_sources: 5,
            ood_sources: 1,
            dim: 32,
            n_train: 100,
            n_dev: 40,
            n_eval: 60,
            n_real_train: 200,
            n_real_dev: 60,
            fake_offset: 3.0,
            spread: 4.5,
            ood_spread: 6.0,
            noise: 1.0,
            nuisance_rank: 4,
            nuisance_scale: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_sources < 2 {
            return Err(Error::Config(format!(
                "need at least 2 sources, got {}",
                self.k_sources
            )));
        }
        if self.dim == 0 || self.n_train < 2 || self.n_dev == 0 || self.n_eval == 0 {
            return Err(Error::Config(
                "dim and per-split counts must be positive (n_train >= 2)".into(),
            ));
        }
        if self.k_sources + self.ood_sources > 100 {
            return Err(Error::Config("at most 100 sources".into()));
        }
        for (name, v) in [
            ("fake_offset", self.fake_offset),
            ("spread", self.spread),
            ("ood_spread", self.ood_spread),
            ("nuisance_scale", self.nuisance_scale),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative"
                )));
            }
        }
        if !(self.noise > 0.0) || !self.noise.is_finite() {
            return Err(Error::Config("noise must be positive".into()));
        }
        Ok(())
    }
}

pub fn source_label(s: usize) -> String {
    format!("src{s:02}")
}

pub fn ood_label(o: usize) -> String {
    format!("ood{o:02}")
}

/// Values as they will read back from an `f32` feature file.
fn narrow(data: Vec<f64>) -> Vec<f64> {
    data.into_iter().map(|v| f64::from(v as f32)).collect()
}

fn gaussian<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v = gaussian(dim, rng);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

struct Generator {
    dim: usize,
    noise: f64,
    nuisance: Vec<Vec<f64>>,
    nuisance_scale: f64,
}

impl Generator {
    fn sample<R: Rng + ?Sized>(&self, center: &[f64], rng: &mut R) -> Vec<f64> {
        let mut x: Vec<f64> = center
            .iter()
            .map(|c| c + self.noise * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect();
        for basis in &self.nuisance {
            let w: f64 = StandardNormal.sample(rng);
            for (xi, bi) in x.iter_mut().zip(basis) {
                *xi += self.nuisance_scale * w * bi;
            }
        }
        debug_assert_eq!(x.len(), self.dim);
        x
    }
}

/// Generates the dataset. Identical seeds give identical datasets.
pub fn generate(seed: u64, cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, "synth");
    let d = cfg.dim;
    let offset: Vec<f64> = unit(d, &mut rng)
        .into_iter()
        .map(|v| v * cfg.fake_offset)
        .collect();
    let n_clusters = cfg.k_sources + cfg.ood_sources;
    let centers: Vec<Vec<f64>> = (0..n_clusters)
        .map(|c| {
            let spread = if c < cfg.k_sources {
                cfg.spread
            } else {
                cfg.ood_spread
            };
            unit(d, &mut rng)
                .iter()
                .zip(&offset)
                .map(|(u, o)| o + spread * u)
                .collect()
        })
        .collect();
    let gen = Generator {
        dim: d,
        noise: cfg.noise,
        nuisance: (0..cfg.nuisance_rank).map(|_| unit(d, &mut rng)).collect(),
        nuisance_scale: cfg.nuisance_scale,
    };

    let mut records = Vec::new();
    let mut features = Vec::new();
    for split in Split::ALL {
        let n = match split {
            Split::Train => cfg.n_train,
            Split::Dev => cfg.n_dev,
            Split::Eval => cfg.n_eval,
        };
        let mut ids = Vec::new();
        let mut data = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            let is_ood = c >= cfg.k_sources;
            if is_ood && split == Split::Train {
                continue;
            }
            let label = if is_ood {
                ood_label(c - cfg.k_sources)
            } else {
                source_label(c)
            };
            for i in 0..n {
                let id = format!("{}-{label}-{i:04}", split.as_str());
                records.push(ManifestRecord {
                    id: id.clone(),
                    label: label.clone(),
                    split,
                    is_ood,
                });
                ids.push(id);
                data.extend(gen.sample(center, &mut rng));
            }
        }
        features.push(EmbeddingSet::new(
            ids.clone(),
            Matrix::from_vec(ids.len(), d, narrow(data))?,
        )?);
    }
    let origin = vec![0.0; d];
    let mut real = |split: &str, n: usize| -> Result<Option<EmbeddingSet>> {
        if n == 0 {
            return Ok(None);
        }
        let ids: Vec<String> = (0..n).map(|i| format!("real-{split}-{i:04}")).collect();
        let data = (0..n).flat_map(|_| gen.sample(&origin, &mut rng)).collect();
        Ok(Some(EmbeddingSet::new(
            ids,
            Matrix::from_vec(n, d, narrow(data))?,
        )?))
    };
    let real_train = real("train", cfg.n_real_train)?;
    let real_dev = real("dev", cfg.n_real_dev)?;
    let eval = features.pop().expect("three splits");
    let dev = features.pop().expect("three splits");
    let train = features.pop().expect("three splits");
    Dataset::new(
        Manifest::from_records(records)?,
        train,
        dev,
        eval,
        real_train,
        real_dev,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_determinism() {
        let cfg = SynthConfig {
            n_train: 4,
            n_dev: 2,
            n_eval: 3,
            n_real_train: 5,
            n_real_dev: 2,
            ..SynthConfig::default()
        };
        let a = generate(7, &cfg).unwrap();
        assert_eq!(a, generate(7, &cfg).unwrap());
        assert_ne!(a, generate(8, &cfg).unwrap());
        assert_eq!(a.manifest.known_labels().len(), 5);
        assert_eq!(a.train.len(), 20);
        assert_eq!(a.dev.len(), 12);
        assert_eq!(a.eval.len(), 18);
        assert_eq!(
            a.manifest.split(Split::Eval).filter(|r| r.is_ood).count(),
            3
        );
        assert!(a.manifest.split(Split::Train).all(|r| !r.is_ood));
        assert_eq!(a.real_train.as_ref().unwrap().len(), 5);
    }

    #[test]
    fn rejects_single_source() {
        let cfg = SynthConfig {
            k_sources: 1,
            ..SynthConfig::default()
        };
        assert!(matches!(generate(0, &cfg), Err(Error::Config(_))));
    }
}
