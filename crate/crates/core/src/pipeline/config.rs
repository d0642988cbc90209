//! Run configuration, stored as TOML.
//!
//! ```toml
//! epochs = 50
//! batch_size = 64
//! learning_rate = 0.001
//! lr_halving_epochs = 5
//! seed = 0
//! architecture = "vgg16"      # or "tiny"
//! input_size = 512
//! init = "uniform-fan-in"     # or "he-uniform"
//! augment = true
//! class_weighting = true
//! threshold = 0.5
//! validation_partition = 4
//! freeze = []                 # parameter-name prefixes excluded from updates
//!
//! [paths]
//! catalog = "data/catalog.csv"
//! image_dir = "data/images"
//! dataset = "data/dataset.csv"
//! output_dir = "runs"
//! ```
//!
//! `FLARECAST_CATALOG`, `FLARECAST_IMAGE_DIR`, `FLARECAST_DATASET` and
//! `FLARECAST_OUTPUT_DIR` override the corresponding paths.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::model::{ArchitectureSpec, InitScheme};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub catalog: PathBuf,
    pub image_dir: PathBuf,
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            catalog: "data/catalog.csv".into(),
            image_dir: "data/images".into(),
            dataset: "data/dataset.csv".into(),
            output_dir: "runs".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_halving_epochs: usize,
    pub seed: u64,
    pub architecture: String,
    pub input_size: usize,
    pub init: String,
    pub augment: bool,
    pub class_weighting: bool,
    pub threshold: f64,
    pub validation_partition: u8,
    pub freeze: Vec<String>,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            learning_rate: 0.001,
            lr_halving_epochs: 5,
            seed: 0,
            architecture: "vgg16".into(),
            input_size: 512,
            init: "uniform-fan-in".into(),
            augment: true,
            class_weighting: true,
            threshold: 0.5,
            validation_partition: 4,
            freeze: Vec::new(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// Small-scale settings: tiny network on 64x64 images.
    pub fn desk() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            learning_rate: 0.2,
            architecture: "tiny".into(),
            input_size: 64,
            init: "he-uniform".into(),
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" | "full" => Ok(Self::default()),
            "desk" => Ok(Self::desk()),
            other => Err(PipelineError::Config(format!("unknown preset `{other}`"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Applies path overrides from `lookup` (normally the process environment).
    pub fn apply_overrides(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        let slots: [(&str, &mut PathBuf); 4] = [
            ("FLARECAST_CATALOG", &mut self.paths.catalog),
            ("FLARECAST_IMAGE_DIR", &mut self.paths.image_dir),
            ("FLARECAST_DATASET", &mut self.paths.dataset),
            ("FLARECAST_OUTPUT_DIR", &mut self.paths.output_dir),
        ];
        for (key, slot) in slots {
            if let Some(v) = lookup(key).filter(|v| !v.is_empty()) {
                *slot = v.into();
            }
        }
    }

    pub fn apply_env(&mut self) {
        self.apply_overrides(|k| std::env::var(k).ok());
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.epochs == 0 || self.batch_size == 0 || self.lr_halving_epochs == 0 {
            return bad("epochs, batch_size and lr_halving_epochs must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold {} outside [0, 1]", self.threshold));
        }
        if !(1..=4).contains(&self.validation_partition) {
            return bad(format!("validation partition {} not in 1..=4", self.validation_partition));
        }
        self.architecture()?;
        self.init_scheme()?;
        Ok(())
    }

    /// `lr0 * 0.5^floor(epoch / lr_halving_epochs)`, with `epoch` counted from 0.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * 0.5f64.powi((epoch / self.lr_halving_epochs) as i32)
    }

    pub fn architecture(&self) -> Result<ArchitectureSpec> {
        let spec = ArchitectureSpec::by_name(&self.architecture)?.with_input(self.input_size, self.input_size);
        spec.validate()?;
        Ok(spec)
    }

    pub fn init_scheme(&self) -> Result<InitScheme> {
        Ok(self.init.parse()?)
    }

    pub fn is_frozen(&self, param: &str) -> bool {
        self.freeze.iter().any(|p| param.starts_with(p.as_str()))
    }
}
