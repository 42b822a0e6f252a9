use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::GenConfig;
use crate::error::{Error, Result};
use crate::model::{Components, ModelConfig};
use crate::outcome::DEFAULT_KAPPA_GRID;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset file to load; when absent the generator section is used.
    pub path: Option<PathBuf>,
    /// Regenerate the synthetic cohort with each run seed.
    pub reseed: bool,
    /// Train/validation/test ratios.
    pub split: [f64; 3],
    pub generator: GenConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            reseed: true,
            split: [0.6, 0.2, 0.2],
            generator: GenConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    /// Self-supervised epochs (missingness and representation losses only)
    /// before end-to-end training.
    pub pretrain_epochs: usize,
    /// Rows per forward pass when scoring whole splits.
    pub eval_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            weight_decay: 1e-6,
            batch_size: 32,
            patience: 30,
            max_epochs: 200,
            pretrain_epochs: 0,
            eval_chunk: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RectifierConfig {
    pub kappa_grid: Vec<f64>,
    pub min_support: usize,
}

impl Default for RectifierConfig {
    fn default() -> Self {
        Self {
            kappa_grid: DEFAULT_KAPPA_GRID.to_vec(),
            min_support: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub mmnar_fusion: bool,
    pub reconstruction: bool,
    pub rectifier: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            mmnar_fusion: true,
            reconstruction: true,
            rectifier: true,
        }
    }
}

impl AblationFlags {
    pub fn components(&self) -> Components {
        Components {
            mmnar_fusion: self.mmnar_fusion,
            reconstruction: self.reconstruction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub rectifier: RectifierConfig,
    pub ablation: AblationFlags,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            data: DataConfig::default(),
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            rectifier: RectifierConfig::default(),
            ablation: AblationFlags::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// SHA-256 of the canonical TOML rendering with the seed list left
    /// out; every artifact records its own seed.
    pub fn hash(&self) -> String {
        let unseeded = Self {
            seeds: Vec::new(),
            ..self.clone()
        };
        hex::encode(Sha256::digest(unseeded.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        let t = &self.training;
        if t.batch_size == 0 || t.max_epochs == 0 || t.eval_chunk == 0 {
            return bad("batch_size, max_epochs and eval_chunk must be positive");
        }
        if !(t.learning_rate > 0.0) || !(t.weight_decay >= 0.0) {
            return bad("learning_rate must be positive and weight_decay non-negative");
        }
        let s = self.data.split;
        if s.iter().any(|r| !(*r >= 0.0)) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("split ratios must be non-negative and sum to 1");
        }
        if self.data.path.is_none() {
            self.data.generator.validate()?;
        }
        Ok(())
    }
}
