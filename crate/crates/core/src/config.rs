//! Run configuration: one TOML file with a section per module. Everything
//! that affects numerics lives here so the config hash pins a run.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentConfig;
use crate::backbone::BackboneConfig;
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::evaluate::CompensationExponents;
use crate::imaging::BitDepth;
use crate::losses::LossWeights;
use crate::optim::AdamConfig;
use crate::phantom::PhantomSpec;
use crate::remover::RemoverConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShadowStartKind {
    /// Shadows begin at the top tissue boundary under each band.
    Surface,
    ImageTop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub count: usize,
    pub shadows_per_image: usize,
    pub shadow_start: ShadowStartKind,
    /// Clear and shadowed ROIs emitted per layer and image.
    pub rois_per_layer: usize,
    pub seed: u64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            count: 10,
            shadows_per_image: 2,
            shadow_start: ShadowStartKind::Surface,
            rois_per_layer: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub compensation: CompensationExponents,
    /// PSNR reported when the error is zero.
    pub psnr_cap_db: f64,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            compensation: CompensationExponents::default(),
            psnr_cap_db: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub bit_depth: u32,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { bit_depth: 8 }
    }
}

impl OutputConfig {
    pub fn depth(&self) -> Result<BitDepth> {
        BitDepth::from_bits(self.bit_depth).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub phantom: PhantomSpec,
    pub simulate: SimulateConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub adam: AdamConfig,
    pub loss: LossWeights,
    pub detector: DetectorConfig,
    pub remover: RemoverConfig,
    pub backbone: BackboneConfig,
    pub evaluate: EvaluateConfig,
    pub output: OutputConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Canonical serialization; every field is written out, defaults
    /// included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_toml().as_bytes()).into()
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash())
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.phantom.validate().map_err(cfg_err)?;
        self.augment.validate().map_err(cfg_err)?;
        self.train.validate()?;
        self.loss.validate()?;
        self.detector.validate()?;
        self.remover.validate()?;
        self.backbone.validate()?;
        self.evaluate.compensation.validate()?;
        self.output.depth()?;
        if self.simulate.rois_per_layer == 0 {
            return Err(Error::Config("rois_per_layer must be >= 1".into()));
        }
        let (h, w) = self.augment.out_size;
        let multiple = self.remover.size_multiple().max(self.detector.size_multiple()) as usize;
        if h % multiple != 0 || w % multiple != 0 {
            return Err(Error::Config(format!(
                "network input {h}x{w} must be a multiple of {multiple}"
            )));
        }
        Ok(())
    }

    /// Override every seed from one CLI value.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.simulate.seed = seed;
        self.train.seed = seed;
        self
    }
}
