//! Colour rendering of change and semantic maps for visual inspection.
//! Unchanged / background pixels are black, or a dimmed copy of the
//! underlying image when one is supplied.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::maps::{ChangeMap, SemanticMap};
use crate::pipeline::PromptConfig;
use crate::tensor::Tensor;

pub const CHANGE_COLOR: [u8; 3] = [0xFF, 0xAB, 0x7C];

const NAMED: [(&str, [u8; 3]); 10] = [
    ("building", [0xFF, 0xAB, 0x7C]),
    ("vegetation", [0xC7, 0xE5, 0xBD]),
    ("tree", [0x54, 0x81, 0x5E]),
    ("playground", [0xFF, 0xB5, 0xC0]),
    ("water", [0x87, 0xCE, 0xEB]),
    ("bareland", [0xD7, 0xDC, 0xE1]),
    ("farmland", [0x00, 0xFF, 0x00]),
    ("cropland", [0x00, 0xFF, 0x00]),
    ("road", [0x80, 0x80, 0x80]),
    ("structure", [0xFF, 0xFF, 0x00]),
];

/// Colour for a class name; unknown names get a fixed pseudo-random colour
/// derived from their index.
pub fn class_color(name: &str, index: u32) -> [u8; 3] {
    NAMED
        .iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(name))
        .map(|(_, c)| *c)
        .unwrap_or_else(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(index as u64);
            [0; 3].map(|_| rng.random_range(64u8..=255))
        })
}

fn base(image: Option<&Tensor>, h: usize, w: usize) -> Result<Vec<f64>> {
    match image {
        None => Ok(vec![0.0; 3 * h * w]),
        Some(t) => {
            let (c, ih, iw) = t.dims3()?;
            if (c, ih, iw) != (3, h, w) {
                return Err(Error::shape(format!(
                    "backdrop {:?} does not match a {h}x{w} map",
                    t.shape()
                )));
            }
            Ok(t.data().iter().map(|v| 0.4 * v).collect())
        }
    }
}

fn paint(out: &mut [f64], hw: usize, p: usize, rgb: [u8; 3]) {
    for ch in 0..3 {
        out[ch * hw + p] = rgb[ch] as f64 / 255.0;
    }
}

/// `[3,H,W]` image with changed pixels in the change colour.
pub fn render_change(map: &ChangeMap, image: Option<&Tensor>) -> Result<Tensor> {
    let (h, w) = (map.height(), map.width());
    let mut out = base(image, h, w)?;
    for (p, &v) in map.data().iter().enumerate() {
        if v == 1 {
            paint(&mut out, h * w, p, CHANGE_COLOR);
        }
    }
    Tensor::new(vec![3, h, w], out)
}

/// `[3,H,W]` image with every non-background class in its colour.
pub fn render_semantic(map: &SemanticMap, prompts: &PromptConfig, image: Option<&Tensor>) -> Result<Tensor> {
    let (h, w) = (map.height(), map.width());
    let mut out = base(image, h, w)?;
    for (p, &c) in map.classes().iter().enumerate() {
        if c == 0 {
            continue;
        }
        let name = prompts
            .class_name(c)
            .ok_or_else(|| Error::invalid(format!("class index {c} is not in the prompt config")))?;
        paint(&mut out, h * w, p, class_color(name, c));
    }
    Tensor::new(vec![3, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn change_pixels_are_coloured() {
        let m = ChangeMap::new(1, 2, vec![0, 1]).unwrap();
        let t = render_change(&m, None).unwrap();
        assert_eq!(t.at3(0, 0, 0), 0.0);
        assert_eq!(t.at3(0, 0, 1), 1.0);
        assert!((t.at3(2, 0, 1) - 0x7C as f64 / 255.0).abs() < 1e-15);
        let bg = Tensor::full(&[3, 1, 2], 0.5);
        assert!((render_change(&m, Some(&bg)).unwrap().at3(1, 0, 0) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn semantic_palette() {
        let cfg = PromptConfig::preset("dsifn").unwrap();
        let water = cfg.class_names().iter().position(|n| n == "water").unwrap() as u32 + 1;
        let m = SemanticMap::new(1, 2, vec![water, 99]).unwrap();
        assert!(render_semantic(&m, &cfg, None).is_err());
        let m = SemanticMap::new(1, 1, vec![water]).unwrap();
        let t = render_semantic(&m, &cfg, None).unwrap();
        assert!((t.at3(0, 0, 0) - 0x87 as f64 / 255.0).abs() < 1e-15);
        assert_eq!(class_color("garden", 2), class_color("garden", 2));
    }
}
