//! Frozen feature extractors for bi-temporal image pairs.
//!
//! [`MockBackbone`] is a deterministic stand-in for a ViT encoder: a seeded
//! patch projection followed by a stack of residual mixing layers (pointwise
//! linear map, then 3×3 box smoothing), with snapshots taken at the tap
//! layers. [`Backbone::External`] reads precomputed features instead.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::params::Init;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub tap_layers: Vec<usize>,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            patch_size: 14,
            embed_dim: 768,
            num_layers: 12,
            tap_layers: vec![2, 5, 8, 11],
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn reduced() -> Self {
        Self {
            patch_size: 14,
            embed_dim: 64,
            num_layers: 4,
            tap_layers: vec![0, 1, 2, 3],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.embed_dim == 0 {
            return Err(Error::Config("patch_size and embed_dim must be positive".into()));
        }
        if self.tap_layers.is_empty() {
            return Err(Error::Config("at least one tap layer is required".into()));
        }
        if self.tap_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "tap layers {:?} must be strictly increasing",
                self.tap_layers
            )));
        }
        if self.tap_layers.iter().any(|&l| l >= self.num_layers) {
            return Err(Error::Config(format!(
                "tap layers {:?} must all be below num_layers = {}",
                self.tap_layers, self.num_layers
            )));
        }
        Ok(())
    }

    pub fn check_image(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let p = self.patch_size;
        if h == 0 || w == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::shape(format!(
                "image {h}x{w} must have both sides a positive multiple of {p}"
            )));
        }
        Ok((h / p, w / p))
    }
}

/// Per-timestamp tap-layer features, each `[C_dim, H/p, W/p]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawFeatures {
    pub layers: Vec<usize>,
    pub t1: Vec<Tensor>,
    pub t2: Vec<Tensor>,
}

impl RawFeatures {
    pub fn grid(&self) -> Result<(usize, usize)> {
        let (_, h, w) = self
            .t1
            .first()
            .ok_or_else(|| Error::shape("no feature levels"))?
            .dims3()?;
        for t in self.t1.iter().chain(&self.t2) {
            let (_, h2, w2) = t.dims3()?;
            if (h2, w2) != (h, w) {
                return Err(Error::shape("tap layers do not share one grid"));
            }
        }
        Ok((h, w))
    }

    pub fn swapped(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            t1: self.t2.clone(),
            t2: self.t1.clone(),
        }
    }

    pub fn timestamp(&self, t: usize) -> &[Tensor] {
        if t == 0 {
            &self.t1
        } else {
            &self.t2
        }
    }
}

#[derive(Clone, Debug)]
pub struct MockBackbone {
    cfg: BackboneConfig,
    patch_proj: Tensor,
    mixers: Vec<Tensor>,
}

impl MockBackbone {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.patch_size;
        let c = cfg.embed_dim;
        let mut init = Init::new(cfg.seed);
        let fan_in = 3 * p * p;
        let patch_proj = init.normal(&[c, fan_in], 4.0 / (fan_in as f64).sqrt());
        let mixers = (0..cfg.num_layers)
            .map(|_| init.normal(&[c, c, 1, 1], 0.5 / (c as f64).sqrt()))
            .collect();
        Ok(Self {
            cfg,
            patch_proj,
            mixers,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Seeded linear projection of each flattened `p×p×3` patch (channel,
    /// then row, then column).
    pub fn patch_embed(&self, image: &Tensor) -> Result<Tensor> {
        let (c, h, w) = image.dims3()?;
        if c != 3 {
            return Err(Error::shape(format!("expected a 3-channel image, got {c}")));
        }
        let (gh, gw) = self.cfg.check_image(h, w)?;
        let p = self.cfg.patch_size;
        let dim = self.cfg.embed_dim;
        let fan_in = 3 * p * p;
        let proj = self.patch_proj.data();
        let mut patch = vec![0.0; fan_in];
        let mut out = vec![0.0; dim * gh * gw];
        for gy in 0..gh {
            for gx in 0..gw {
                let mut k = 0;
                for ch in 0..3 {
                    for dy in 0..p {
                        for dx in 0..p {
                            patch[k] = image.at3(ch, gy * p + dy, gx * p + dx);
                            k += 1;
                        }
                    }
                }
                for o in 0..dim {
                    let row = &proj[o * fan_in..(o + 1) * fan_in];
                    out[(o * gh + gy) * gw + gx] = row.iter().zip(&patch).map(|(a, b)| a * b).sum();
                }
            }
        }
        Tensor::new(vec![dim, gh, gw], out)
    }

    /// Tap-layer snapshots for one image.
    pub fn encode(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = self.patch_embed(image)?;
        let mut taps = Vec::with_capacity(self.cfg.tap_layers.len());
        for (layer, w) in self.mixers.iter().enumerate() {
            let mixed = ops::mean_smooth3(&ops::conv2d(&x, w, None, 1, 0)?)?;
            x.add_assign(&mixed)?;
            if self.cfg.tap_layers.contains(&layer) {
                taps.push(x.clone());
            }
        }
        Ok(taps)
    }

    pub fn extract_features(&self, image1: &Tensor, image2: &Tensor) -> Result<RawFeatures> {
        if image1.shape() != image2.shape() {
            return Err(Error::shape(format!(
                "bi-temporal images differ in shape: {:?} vs {:?}",
                image1.shape(),
                image2.shape()
            )));
        }
        Ok(RawFeatures {
            layers: self.cfg.tap_layers.clone(),
            t1: self.encode(image1)?,
            t2: self.encode(image2)?,
        })
    }
}

/// How features are obtained, as selected by `--backbone`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BackboneSelector {
    Mock { seed: u64 },
    External { dir: PathBuf },
}

impl FromStr for BackboneSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some(("mock", seed)) => seed
                .parse()
                .map(|seed| BackboneSelector::Mock { seed })
                .map_err(|_| Error::Config(format!("bad mock seed `{seed}`"))),
            Some(("external", path)) if !path.is_empty() => Ok(BackboneSelector::External { dir: path.into() }),
            _ => Err(Error::Config(format!(
                "backbone must be `mock:<seed>` or `external:<path>`, got `{s}`"
            ))),
        }
    }
}

pub enum Backbone {
    Mock(MockBackbone),
    /// Precomputed features stored as `<dir>/<stem>/t{1,2}_l{layer}.s2ct`.
    External { dir: PathBuf, cfg: BackboneConfig },
}

impl Backbone {
    pub fn from_selector(sel: &BackboneSelector, mut cfg: BackboneConfig) -> Result<Self> {
        match sel {
            BackboneSelector::Mock { seed } => {
                cfg.seed = *seed;
                Ok(Backbone::Mock(MockBackbone::new(cfg)?))
            }
            BackboneSelector::External { dir } => {
                cfg.validate()?;
                Ok(Backbone::External { dir: dir.clone(), cfg })
            }
        }
    }

    pub fn config(&self) -> &BackboneConfig {
        match self {
            Backbone::Mock(m) => m.config(),
            Backbone::External { cfg, .. } => cfg,
        }
    }

    pub fn features(&self, stem: &str, image1: &Tensor, image2: &Tensor) -> Result<RawFeatures> {
        match self {
            Backbone::Mock(m) => m.extract_features(image1, image2),
            Backbone::External { dir, cfg } => {
                let load = |t: usize| -> Result<Vec<Tensor>> {
                    cfg.tap_layers
                        .iter()
                        .map(|l| Tensor::load(external_feature_path(dir, stem, t, *l)))
                        .collect()
                };
                let feats = RawFeatures {
                    layers: cfg.tap_layers.clone(),
                    t1: load(1)?,
                    t2: load(2)?,
                };
                feats.grid()?;
                Ok(feats)
            }
        }
    }
}

pub fn external_feature_path(dir: &Path, stem: &str, timestamp: usize, layer: usize) -> PathBuf {
    dir.join(stem).join(format!("t{timestamp}_l{layer}.s2ct"))
}
