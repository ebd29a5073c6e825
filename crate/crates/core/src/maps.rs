use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Binary change map over the image grid (1 = change).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChangeMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl ChangeMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "{} values for a {height}x{width} change map",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::invalid(format!("change map value {v} is not binary")));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    /// Per-pixel argmax of `[2,H,W]` logits; channel 1 is change and ties
    /// resolve to no-change.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let (c, h, w) = logits.dims3()?;
        if c != 2 {
            return Err(Error::shape(format!("change logits need 2 channels, got {c}")));
        }
        let (no, yes) = logits.data().split_at(h * w);
        let data = no.iter().zip(yes).map(|(n, y)| u8::from(y > n)).collect();
        Ok(Self { height: h, width: w, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn changed(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![1, self.height, self.width],
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("dimensions are consistent")
    }

    pub(crate) fn expect_grid(&self, h: usize, w: usize) -> Result<()> {
        if (self.height, self.width) != (h, w) {
            return Err(Error::shape(format!(
                "grids differ: {}x{} vs {h}x{w}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Class-index map over the image grid; 0 is background / no class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticMap {
    height: usize,
    width: usize,
    classes: Vec<u32>,
}

impl SemanticMap {
    pub fn new(height: usize, width: usize, classes: Vec<u32>) -> Result<Self> {
        if classes.len() != height * width {
            return Err(Error::shape(format!(
                "{} values for a {height}x{width} semantic map",
                classes.len()
            )));
        }
        Ok(Self {
            height,
            width,
            classes,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    pub fn max_class(&self) -> u32 {
        self.classes.iter().copied().max().unwrap_or(0)
    }

    pub(crate) fn expect_grid(&self, h: usize, w: usize) -> Result<()> {
        if (self.height, self.width) != (h, w) {
            return Err(Error::shape(format!(
                "grids differ: {}x{} vs {h}x{w}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}
