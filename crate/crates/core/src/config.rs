//! Run configuration file.
//!
//! ```toml
//! seed = 7                      # optional; overrides head.seed and train.seed
//! backbone_source = "mock:0"    # or "external:<dir>"
//! prompts = "preset:whu-cd"     # file path or preset name
//! max_steps = 500               # optional cap on optimizer steps
//!
//! [data]
//! train = "data/train"
//! test = "data/test"
//!
//! [backbone]   # patch_size, embed_dim, num_layers, tap_layers
//! [head]       # feature_dim, channels, window, experts, heads, ...
//! [train]      # learning_rate, batch_size, epochs
//! [loss]       # alpha, beta_ups, upsilon
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, BackboneSelector};
use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::training::{LossWeights, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub backbone_source: String,
    pub prompts: Option<String>,
    pub max_steps: Option<usize>,
    pub out: Option<PathBuf>,
    pub data: DataPaths,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            backbone_source: "mock:0".into(),
            prompts: None,
            max_steps: None,
            out: None,
            data: DataPaths::default(),
            backbone: BackboneConfig::default(),
            head: HeadConfig::default(),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

impl RunConfig {
    /// Small backbone and head sized for 168×168 synthetic pairs.
    pub fn reduced() -> Self {
        Self {
            backbone: BackboneConfig::reduced(),
            head: HeadConfig::reduced(),
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses, resolves relative paths and checks that they exist.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.data.train.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.data.test.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.out.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.prompts.as_mut() {
            if !p.starts_with("preset:") && Path::new(p.as_str()).is_relative() {
                *p = base.join(p.as_str()).to_string_lossy().into_owned();
            }
        }
        if let BackboneSelector::External { dir } = cfg.backbone_source.parse()? {
            if dir.is_relative() {
                cfg.backbone_source = format!("external:{}", base.join(dir).display());
            }
        }
        cfg.check_paths()?;
        Ok(cfg)
    }

    pub fn check_paths(&self) -> Result<()> {
        let mut must_exist: Vec<PathBuf> = [&self.data.train, &self.data.test].into_iter().flatten().cloned().collect();
        if let Some(p) = self.prompts.as_ref().filter(|p| !p.starts_with("preset:")) {
            must_exist.push(p.into());
        }
        if let BackboneSelector::External { dir } = self.backbone_source.parse()? {
            must_exist.push(dir);
        }
        match must_exist.into_iter().find(|p| !p.exists()) {
            Some(p) => Err(Error::Config(format!("{} does not exist", p.display()))),
            None => Ok(()),
        }
    }

    /// Applies the top-level seed and validates every section.
    pub fn resolved(mut self) -> Result<Self> {
        if let Some(seed) = self.seed {
            self.head.seed = seed;
            self.train.seed = seed;
        }
        self.backbone.validate()?;
        self.head.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        if self.backbone.embed_dim != self.head.feature_dim {
            return Err(Error::Config(format!(
                "backbone embed_dim {} differs from head feature_dim {}",
                self.backbone.embed_dim, self.head.feature_dim
            )));
        }
        if self.backbone.tap_layers.len() != crate::head::LEVELS {
            return Err(Error::Config(format!(
                "the head needs {} tap layers, backbone lists {}",
                crate::head::LEVELS,
                self.backbone.tap_layers.len()
            )));
        }
        self.backbone_source.parse::<BackboneSelector>()?;
        Ok(self)
    }
}
