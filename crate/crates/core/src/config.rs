//! Run configuration, read from TOML. Every field has a default, so an
//! empty file is a valid config.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::losses::{BetaSchedule, MixupConfig, OcSoftmaxParams};
use crate::metrics::EceConfig;
use crate::system::NsdConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden layer widths before the embedding layer.
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    /// Half-width of the uniform init of the source head swapped in after
    /// the real-emphasis stage.
    pub head_init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![128],
            embedding_dim: 144,
            head_init_scale: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NpairConfig {
    /// L2-normalize embeddings before taking inner products.
    pub normalize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcConfig {
    pub scale: f64,
    pub m_real: f64,
    pub m_fake: f64,
}

impl Default for OcConfig {
    fn default() -> Self {
        OcConfig {
            scale: 20.0,
            m_real: 0.9,
            m_fake: 0.2,
        }
    }
}

impl OcConfig {
    pub fn params(&self, direction: Vec<f64>) -> Result<OcSoftmaxParams> {
        OcSoftmaxParams::new(self.scale, self.m_real, self.m_fake, direction)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub mode: FusionMode,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    /// Real-emphasis stage.
    pub re: TrainConfig,
    /// Dispersion stage.
    pub fd: TrainConfig,
    pub mixup: MixupConfig,
    pub npair: NpairConfig,
    pub schedule: BetaSchedule,
    pub oc_softmax: OcConfig,
    pub nsd: NsdConfig,
    pub ece: EceConfig,
    pub fusion: FusionConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.embedding_dim == 0 || self.model.hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(self.model.head_init_scale > 0.0) || !self.model.head_init_scale.is_finite() {
            return Err(Error::Config("head_init_scale must be positive".into()));
        }
        self.re.validate()?;
        self.fd.validate()?;
        self.mixup.validate()?;
        self.schedule.validate()?;
        OcSoftmaxParams::new(
            self.oc_softmax.scale,
            self.oc_softmax.m_real,
            self.oc_softmax.m_fake,
            vec![1.0],
        )?;
        if self.nsd.k == 0 {
            return Err(Error::Config("nsd.k must be at least 1".into()));
        }
        if self.nsd.tau.is_some_and(|t| !t.is_finite()) {
            return Err(Error::Config("nsd.tau must be finite".into()));
        }
        if self.ece.m_bins == 0 {
            return Err(Error::Config("ece.m_bins must be at least 1".into()));
        }
        Ok(())
    }

    /// Stage configs with the run seed filled in.
    pub fn stage(&self, which: &TrainConfig) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..which.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ood::Scaling;

    #[test]
    fn empty_is_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_sections_and_roundtrip() {
        let cfg = RunConfig::parse(
            "seed = 7\n[fd]\nepochs = 3\n[nsd]\nk = 2\nscaling = \"none\"\n[schedule]\nfinal = 0.5\n[fusion]\nmode = \"logit\"\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.fd.epochs, 3);
        assert_eq!(cfg.fd.lr, TrainConfig::default().lr);
        assert_eq!(cfg.nsd.k, 2);
        assert_eq!(cfg.nsd.scaling, Scaling::None);
        assert_eq!(cfg.schedule.final_value, 0.5);
        assert_eq!(cfg.fusion.mode, FusionMode::Logit);
        assert_eq!(cfg.stage(&cfg.fd).seed, 7);
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        for bad in [
            "sed = 1",
            "[model]\nembedding_dim = 0",
            "[fd]\nbatch_size = 0",
            "[oc_softmax]\nm_real = 0.1",
            "[mixup]\nalpha = -1.0",
            "[nsd]\nk = 0",
            "[ece]\nm_bins = 0",
            "[schedule]\nfinal_epoch = 10",
        ] {
            assert!(
                matches!(RunConfig::parse(bad), Err(Error::Config(_))),
                "{bad}"
            );
        }
    }
}
