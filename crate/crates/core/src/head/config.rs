use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of pyramid levels; level `k` sits at scale `4 / 2^k` of the
/// backbone grid.
pub const LEVELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Channel count of the incoming backbone features.
    pub feature_dim: usize,
    /// Per-level widths, finest level first.
    pub channels: [usize; LEVELS],
    pub window: usize,
    pub experts: usize,
    pub heads: usize,
    pub up_dim: usize,
    pub embed_dim: usize,
    pub moe_hidden_ratio: usize,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            feature_dim: 768,
            channels: [48, 64, 80, 96],
            window: 9,
            experts: 4,
            heads: 4,
            up_dim: 48,
            embed_dim: 64,
            moe_hidden_ratio: 2,
            seed: 0,
        }
    }
}

impl HeadConfig {
    /// Narrow head for small synthetic experiments; pairs with
    /// [`BackboneConfig::reduced`](crate::backbone::BackboneConfig::reduced).
    pub fn reduced() -> Self {
        Self {
            feature_dim: 64,
            channels: [8, 12, 16, 20],
            window: 3,
            experts: 2,
            heads: 4,
            up_dim: 16,
            embed_dim: 16,
            moe_hidden_ratio: 2,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_dim", self.feature_dim),
            ("window", self.window),
            ("experts", self.experts),
            ("heads", self.heads),
            ("up_dim", self.up_dim),
            ("embed_dim", self.embed_dim),
            ("moe_hidden_ratio", self.moe_hidden_ratio),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        for (k, &c) in self.channels.iter().enumerate() {
            if c == 0 || c % self.heads != 0 {
                return Err(Error::Config(format!(
                    "level {k}: {c} channels are not divisible by {} heads",
                    self.heads
                )));
            }
        }
        Ok(())
    }

    /// Spatial size of every pyramid level for a `grid_h × grid_w`
    /// backbone grid, checking the divisibility the head relies on.
    pub fn level_sizes(&self, grid_h: usize, grid_w: usize) -> Result<[(usize, usize); LEVELS]> {
        if grid_h % 2 != 0 || grid_w % 2 != 0 || grid_h == 0 || grid_w == 0 {
            return Err(Error::shape(format!(
                "backbone grid {grid_h}x{grid_w} must be even on both sides"
            )));
        }
        let sizes = [
            (4 * grid_h, 4 * grid_w),
            (2 * grid_h, 2 * grid_w),
            (grid_h, grid_w),
            (grid_h / 2, grid_w / 2),
        ];
        for (k, &(h, w)) in sizes.iter().enumerate() {
            if h % self.window != 0 || w % self.window != 0 {
                return Err(Error::shape(format!(
                    "level {k} ({h}x{w}) is not divisible by window {}",
                    self.window
                )));
            }
        }
        Ok(sizes)
    }

    pub fn head_dim(&self, level: usize) -> usize {
        self.channels[level] / self.heads
    }

    pub fn moe_hidden(&self, level: usize) -> usize {
        self.moe_hidden_ratio * self.channels[level]
    }

    /// Windows per level for a given grid.
    pub fn window_counts(&self, grid_h: usize, grid_w: usize) -> Result<[usize; LEVELS]> {
        let sizes = self.level_sizes(grid_h, grid_w)?;
        Ok(sizes.map(|(h, w)| (h / self.window) * (w / self.window)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_ladder_at_504() {
        let cfg = HeadConfig::default();
        let sizes = cfg.level_sizes(36, 36).unwrap();
        assert_eq!(sizes.map(|s| s.0), [144, 72, 36, 18]);
        assert_eq!(cfg.window_counts(36, 36).unwrap(), [256, 64, 16, 4]);
    }

    #[test]
    fn reduced_ladder_at_168() {
        let cfg = HeadConfig {
            window: 3,
            ..Default::default()
        };
        assert_eq!(cfg.level_sizes(12, 12).unwrap().map(|s| s.0), [48, 24, 12, 6]);
    }

    #[test]
    fn divisibility_errors_name_the_level() {
        let cfg = HeadConfig::default();
        let err = cfg.level_sizes(12, 12).unwrap_err().to_string();
        assert!(err.contains("level 0"), "{err}");
        assert!(cfg.level_sizes(13, 12).is_err());
        let bad = HeadConfig {
            channels: [48, 64, 80, 98],
            ..Default::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("level 3"));
    }
}
