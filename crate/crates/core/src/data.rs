//! Dataset layout, PNG conversion, resizing, tiling and synthetic pairs.
//!
//! A dataset root holds `A/` (T1 images), `B/` (T2 images), optionally
//! `label/` (binary change, 0/255) and `labelA/` + `labelB/` (class-index
//! maps). Files are PNGs matched by stem.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::maps::{ChangeMap, SemanticMap};
use crate::ops;
use crate::tensor::Tensor;
use crate::training::LabeledPair;

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| image_err(path, e))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

/// 8-bit RGB image as `[3,H,W]` in `[0,1]`.
pub fn read_rgb(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    Ok(rgb_to_tensor(&open(path)?.to_rgb8()))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f64 / 255.0
    })
}

/// Rounds `[3,H,W]` values in `[0,1]` to 8 bits.
pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::shape(format!("expected a 3-channel image, got {c}")));
    }
    let d = t.data();
    let mut raw = vec![0u8; 3 * h * w];
    for p in 0..h * w {
        for ch in 0..3 {
            raw[p * 3 + ch] = (d[ch * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer matches dimensions"))
}

pub fn write_rgb(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    create_parent(path)?;
    tensor_to_rgb(t)?.save(path).map_err(|e| image_err(path, e))
}

/// Binary map; any non-zero pixel (in any channel) is change.
pub fn read_binary_map(path: impl AsRef<Path>) -> Result<ChangeMap> {
    let path = path.as_ref();
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        DynamicImage::ImageLuma8(g) => g.into_raw().into_iter().map(|v| u8::from(v != 0)).collect(),
        other => other
            .to_rgb16()
            .pixels()
            .map(|p| u8::from(p.0.iter().any(|&v| v != 0)))
            .collect(),
    };
    ChangeMap::new(h, w, data)
}

pub fn write_binary_map(path: impl AsRef<Path>, m: &ChangeMap) -> Result<()> {
    let path = path.as_ref();
    create_parent(path)?;
    let raw = m.data().iter().map(|&v| v * 255).collect();
    GrayImage::from_raw(m.width() as u32, m.height() as u32, raw)
        .expect("buffer matches dimensions")
        .save(path)
        .map_err(|e| image_err(path, e))
}

/// Single-channel class-index map (8- or 16-bit).
pub fn read_index_map(path: impl AsRef<Path>) -> Result<SemanticMap> {
    let path = path.as_ref();
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let classes = match img {
        DynamicImage::ImageLuma8(g) => g.into_raw().into_iter().map(u32::from).collect(),
        DynamicImage::ImageLuma16(g) => g.into_raw().into_iter().map(u32::from).collect(),
        _ => {
            return Err(Error::Format(format!(
                "{}: class-index maps must be single-channel",
                path.display()
            )))
        }
    };
    SemanticMap::new(h, w, classes)
}

pub fn write_index_map(path: impl AsRef<Path>, m: &SemanticMap) -> Result<()> {
    let path = path.as_ref();
    create_parent(path)?;
    let (w, h) = (m.width() as u32, m.height() as u32);
    let res = if m.max_class() <= u8::MAX as u32 {
        let raw = m.classes().iter().map(|&c| c as u8).collect();
        GrayImage::from_raw(w, h, raw).expect("buffer matches dimensions").save(path)
    } else if m.max_class() <= u16::MAX as u32 {
        let raw = m.classes().iter().map(|&c| c as u16).collect();
        ImageBuffer::<Luma<u16>, Vec<u16>>::from_raw(w, h, raw)
            .expect("buffer matches dimensions")
            .save(path)
    } else {
        return Err(Error::invalid(format!("class index {} does not fit 16 bits", m.max_class())));
    };
    res.map_err(|e| image_err(path, e))
}

/// Stems present under `dir` (PNG files only), sorted.
fn stems_in(dir: &Path) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string());
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetLayout {
    pub root: PathBuf,
    pub stems: Vec<String>,
    pub has_labels: bool,
    pub has_semantic: bool,
}

impl DatasetLayout {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let a = stems_in(&root.join("A"))?;
        if a.is_empty() {
            return Err(Error::invalid(format!("{} has no images under A/", root.display())));
        }
        let b = stems_in(&root.join("B"))?;
        let check = |dir: &str, present: &BTreeSet<String>| -> Result<()> {
            match a.iter().find(|s| !present.contains(*s)) {
                Some(stem) => Err(Error::Pair {
                    stem: stem.clone(),
                    path: root.join(dir).join(format!("{stem}.png")),
                    reason: format!("missing {dir}/ counterpart"),
                }),
                None => Ok(()),
            }
        };
        check("B", &b)?;
        let has_labels = root.join("label").is_dir();
        if has_labels {
            check("label", &stems_in(&root.join("label"))?)?;
        }
        let has_semantic = root.join("labelA").is_dir() || root.join("labelB").is_dir();
        if has_semantic {
            check("labelA", &stems_in(&root.join("labelA"))?)?;
            check("labelB", &stems_in(&root.join("labelB"))?)?;
        }
        Ok(Self {
            root,
            stems: a.into_iter().collect(),
            has_labels,
            has_semantic,
        })
    }

    pub fn path(&self, dir: &str, stem: &str) -> PathBuf {
        self.root.join(dir).join(format!("{stem}.png"))
    }

    pub fn load_images(&self, stem: &str) -> Result<(Tensor, Tensor)> {
        let read = |dir: &str| {
            let path = self.path(dir, stem);
            read_rgb(&path).map_err(|e| Error::Pair {
                stem: stem.into(),
                path,
                reason: e.to_string(),
            })
        };
        let (i1, i2) = (read("A")?, read("B")?);
        if i1.shape() != i2.shape() {
            return Err(Error::Pair {
                stem: stem.into(),
                path: self.path("B", stem),
                reason: format!("size {:?} differs from A/ {:?}", &i2.shape()[1..], &i1.shape()[1..]),
            });
        }
        Ok((i1, i2))
    }

    /// Images scaled to `[0,1]` with the binary label (non-zero → change).
    pub fn load_pair(&self, stem: &str) -> Result<LabeledPair> {
        let (i1, i2) = self.load_images(stem)?;
        let path = self.path("label", stem);
        let label = read_binary_map(&path).map_err(|e| Error::Pair {
            stem: stem.into(),
            path: path.clone(),
            reason: e.to_string(),
        })?;
        LabeledPair::new(stem, i1, i2, label).map_err(|e| Error::Pair {
            stem: stem.into(),
            path,
            reason: e.to_string(),
        })
    }

    pub fn load_all(&self) -> Result<Vec<LabeledPair>> {
        self.stems.iter().map(|s| self.load_pair(s)).collect()
    }

    pub fn load_semantic(&self, stem: &str) -> Result<[SemanticMap; 2]> {
        let read = |dir: &str| {
            let path = self.path(dir, stem);
            read_index_map(&path).map_err(|e| Error::Pair {
                stem: stem.into(),
                path,
                reason: e.to_string(),
            })
        };
        Ok([read("labelA")?, read("labelB")?])
    }
}

/// Bilinear resize of `[C,H,W]` to the largest multiple of `patch` per side.
pub fn resize_to_patch_multiple(image: &Tensor, patch: usize) -> Result<Tensor> {
    let (_, h, w) = image.dims3()?;
    if patch == 0 || h < patch || w < patch {
        return Err(Error::shape(format!("image {h}x{w} is smaller than the {patch}-pixel patch")));
    }
    let (th, tw) = (h / patch * patch, w / patch * patch);
    if (th, tw) == (h, w) {
        return Ok(image.clone());
    }
    ops::bilinear_resize(image, th, tw)
}

/// Window offsets along one axis: multiples of `stride`, with the last
/// one clamped to `dim - window` so the axis is covered.
pub fn tile_offsets(dim: usize, window: usize, stride: usize) -> Result<Vec<usize>> {
    if window == 0 || stride == 0 {
        return Err(Error::invalid("window and stride must be positive"));
    }
    if window > dim {
        return Err(Error::invalid(format!("window {window} exceeds image side {dim}")));
    }
    if stride > window {
        return Err(Error::invalid(format!("stride {stride} exceeds window {window}, tiles would leave gaps")));
    }
    let mut out = Vec::new();
    let mut o = 0;
    loop {
        out.push(o.min(dim - window));
        if o + window >= dim {
            return Ok(out);
        }
        o += stride;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub y: usize,
    pub x: usize,
    pub size: usize,
}

/// Row-major `window × window` tiles of a `[C,H,W]` image.
pub fn tile(image: &Tensor, window: usize, stride: usize) -> Result<Vec<(Placement, Tensor)>> {
    let (c, h, w) = image.dims3()?;
    let ys = tile_offsets(h, window, stride)?;
    let xs = tile_offsets(w, window, stride)?;
    let mut out = Vec::with_capacity(ys.len() * xs.len());
    for &y in &ys {
        for &x in &xs {
            let t = Tensor::from_fn(&[c, window, window], |i| {
                let (ch, r) = (i / (window * window), i % (window * window));
                image.at3(ch, y + r / window, x + r % window)
            });
            out.push((Placement { y, x, size: window }, t));
        }
    }
    Ok(out)
}

/// Writes tiles back in order; later tiles overwrite overlaps.
pub fn stitch(tiles: &[(Placement, Tensor)], height: usize, width: usize) -> Result<Tensor> {
    let c = match tiles.first() {
        Some((_, t)) => t.dims3()?.0,
        None => return Err(Error::invalid("no tiles to stitch")),
    };
    let mut out = Tensor::zeros(&[c, height, width]);
    for (p, t) in tiles {
        let (tc, th, tw) = t.dims3()?;
        if tc != c || p.y + th > height || p.x + tw > width {
            return Err(Error::shape(format!("tile at ({}, {}) does not fit", p.y, p.x)));
        }
        let d = out.data_mut();
        for ch in 0..c {
            for r in 0..th {
                for col in 0..tw {
                    d[(ch * height + p.y + r) * width + p.x + col] = t.at3(ch, r, col);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub n: usize,
    pub size: usize,
    pub seed: u64,
    pub patch_size: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            n: 8,
            size: 168,
            seed: 0,
            patch_size: 14,
        }
    }
}

/// A cell-aligned rectangle `[y0, y1) × [x0, x1)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Alteration {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

pub struct SynthPair {
    pub stem: String,
    pub image1: RgbImage,
    pub image2: RgbImage,
    pub alterations: Vec<Alteration>,
}

impl SynthPair {
    /// The change label implied by the alterations.
    pub fn label(&self) -> ChangeMap {
        let (w, h) = (self.image1.width() as usize, self.image1.height() as usize);
        let mut data = vec![0u8; h * w];
        for a in &self.alterations {
            for y in a.y0..a.y1 {
                data[y * w + a.x0..y * w + a.x1].fill(1);
            }
        }
        ChangeMap::new(h, w, data).expect("label matches the image grid")
    }

    pub fn to_labeled(&self) -> LabeledPair {
        LabeledPair::new(
            &self.stem,
            rgb_to_tensor(&self.image1),
            rgb_to_tensor(&self.image2),
            self.label(),
        )
        .expect("synthetic pairs are consistent")
    }
}

fn color_gap(a: [u8; 3], b: [u8; 3]) -> u32 {
    a.iter().zip(&b).map(|(&x, &y)| (x as i32 - y as i32).unsigned_abs()).sum()
}

/// Bi-temporal pairs on a grid of `2·patch` cells: every cell has a base
/// colour plus pixel noise, identical at both timestamps; pair `i` repaints
/// `i mod 4` cell-aligned rectangles at T2 with a distinct striped colour.
pub fn synth_pairs(opts: &SynthOptions, head: &HeadConfig) -> Result<Vec<SynthPair>> {
    let p = opts.patch_size;
    if p == 0 || opts.size == 0 || opts.size % p != 0 {
        return Err(Error::invalid(format!("size {} is not a multiple of the {p}-pixel patch", opts.size)));
    }
    let grid = opts.size / p;
    head.level_sizes(grid, grid)?;
    let cell = 2 * p;
    let cells = opts.size / cell;
    let size = opts.size;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut pairs = Vec::with_capacity(opts.n);
    for i in 0..opts.n {
        let base: Vec<[u8; 3]> = (0..cells * cells)
            .map(|_| [0; 3].map(|_| rng.random_range(40u8..=215)))
            .collect();
        let mut raw = vec![0u8; size * size * 3];
        for y in 0..size {
            for x in 0..size {
                let b = base[(y / cell) * cells + x / cell];
                for ch in 0..3 {
                    let noise: i32 = rng.random_range(-12..=12);
                    raw[(y * size + x) * 3 + ch] = (b[ch] as i32 + noise) as u8;
                }
            }
        }
        let image1 = RgbImage::from_raw(size as u32, size as u32, raw.clone()).expect("buffer matches");
        let mut image2 = RgbImage::from_raw(size as u32, size as u32, raw).expect("buffer matches");

        let mut alterations = Vec::new();
        for _ in 0..i % 4 {
            let ch = rng.random_range(2.min(cells)..=3.min(cells));
            let cw = rng.random_range(2.min(cells)..=3.min(cells));
            let cy = rng.random_range(0..=cells - ch);
            let cx = rng.random_range(0..=cells - cw);
            let covered: Vec<[u8; 3]> = (cy..cy + ch)
                .flat_map(|r| (cx..cx + cw).map(move |c| (r, c)))
                .map(|(r, c)| base[r * cells + c])
                .collect();
            let mut color = [0u8; 3];
            for _ in 0..64 {
                color = [0; 3].map(|_| rng.random_range(20u8..=235));
                if covered.iter().all(|&b| color_gap(b, color) >= 180) {
                    break;
                }
            }
            let a = Alteration {
                y0: cy * cell,
                y1: (cy + ch) * cell,
                x0: cx * cell,
                x1: (cx + cw) * cell,
            };
            for y in a.y0..a.y1 {
                for x in a.x0..a.x1 {
                    let stripe = if (x + y) / 4 % 2 == 0 { 0 } else { 20 };
                    let px = color.map(|v| v.saturating_add(stripe));
                    image2.put_pixel(x as u32, y as u32, image::Rgb(px));
                }
            }
            alterations.push(a);
        }
        pairs.push(SynthPair {
            stem: format!("synth_{i:04}"),
            image1,
            image2,
            alterations,
        });
    }
    Ok(pairs)
}

/// Writes [`synth_pairs`] under `root` in the standard layout.
pub fn synth_dataset(root: impl AsRef<Path>, opts: &SynthOptions, head: &HeadConfig) -> Result<DatasetLayout> {
    let root = root.as_ref();
    for pair in synth_pairs(opts, head)? {
        let a = root.join("A").join(format!("{}.png", pair.stem));
        let b = root.join("B").join(format!("{}.png", pair.stem));
        create_parent(&a)?;
        create_parent(&b)?;
        pair.image1.save(&a).map_err(|e| image_err(&a, e))?;
        pair.image2.save(&b).map_err(|e| image_err(&b, e))?;
        write_binary_map(root.join("label").join(format!("{}.png", pair.stem)), &pair.label())?;
    }
    DatasetLayout::open(root)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_head() -> HeadConfig {
        HeadConfig {
            window: 3,
            ..HeadConfig::default()
        }
    }

    #[test]
    fn patch_multiple_sizes() {
        for (side, want) in [(512, 504), (504, 504), (168, 168)] {
            let img = Tensor::zeros(&[3, side, side]);
            assert_eq!(resize_to_patch_multiple(&img, 14).unwrap().shape(), &[3, want, want]);
        }
        assert!(resize_to_patch_multiple(&Tensor::zeros(&[3, 10, 20]), 14).is_err());
    }

    #[test]
    fn constant_label_survives_resize_round_trip() {
        let label = Tensor::full(&[1, 512, 512], 1.0);
        let down = resize_to_patch_multiple(&label, 14).unwrap();
        let back = ops::bilinear_resize(&down, 512, 512).unwrap();
        assert!(back.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn tiling_examples() {
        assert_eq!(tile_offsets(1024, 512, 512).unwrap(), vec![0, 512]);
        assert_eq!(tile_offsets(700, 512, 512).unwrap(), vec![0, 188]);
        assert_eq!(tile_offsets(512, 512, 512).unwrap(), vec![0]);
        assert!(tile_offsets(500, 512, 512).is_err());
        let img = Tensor::zeros(&[1, 1024, 1024]);
        assert_eq!(tile(&img, 512, 512).unwrap().len(), 4);
        let img = Tensor::zeros(&[1, 700, 512]);
        let t = tile(&img, 512, 512).unwrap();
        assert_eq!(
            t.iter().map(|(p, _)| (p.y, p.x)).collect::<Vec<_>>(),
            vec![(0, 0), (188, 0)]
        );
    }

    proptest! {
        #[test]
        fn stitch_reconstructs(h in 4usize..40, w in 4usize..40, window in 1usize..12, stride in 1usize..12) {
            prop_assume!(window <= h.min(w));
            prop_assume!(stride <= window);
            let img = Tensor::from_fn(&[2, h, w], |i| i as f64);
            let tiles = tile(&img, window, stride).unwrap();
            let mut covered = vec![false; h * w];
            for (p, _) in &tiles {
                for y in p.y..p.y + window {
                    for x in p.x..p.x + window {
                        covered[y * w + x] = true;
                    }
                }
            }
            prop_assert!(covered.iter().all(|&c| c));
            prop_assert_eq!(stitch(&tiles, h, w).unwrap(), img);
        }
    }

    #[test]
    fn synth_is_deterministic_and_self_consistent() {
        let opts = SynthOptions::default();
        let a = synth_pairs(&opts, &small_head()).unwrap();
        let b = synth_pairs(&opts, &small_head()).unwrap();
        assert_eq!(a.len(), 8);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image1, y.image1);
            assert_eq!(x.image2, y.image2);
        }
        for pair in &a {
            let label = pair.label();
            let (i1, i2) = (pair.image1.as_raw(), pair.image2.as_raw());
            for p in 0..label.data().len() {
                let differs = i1[3 * p..3 * p + 3] != i2[3 * p..3 * p + 3];
                if label.data()[p] == 0 {
                    assert!(!differs, "{}: pixel {p} changed outside the label", pair.stem);
                }
            }
            if pair.alterations.is_empty() {
                assert_eq!(label.changed(), 0);
                assert_eq!(pair.image1, pair.image2);
            } else {
                assert!(label.changed() > 0);
            }
        }
    }

    #[test]
    fn synth_rejects_bad_sizes() {
        let opts = SynthOptions {
            size: 170,
            ..SynthOptions::default()
        };
        assert!(synth_pairs(&opts, &small_head()).is_err());
        // 168 gives a 6-cell coarsest level, not divisible by a 9-wide window
        assert!(synth_pairs(&SynthOptions::default(), &HeadConfig::default()).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let opts = SynthOptions {
            n: 3,
            ..SynthOptions::default()
        };
        let layout = synth_dataset(dir.path(), &opts, &small_head()).unwrap();
        assert_eq!(layout.stems.len(), 3);
        assert!(layout.has_labels && !layout.has_semantic);
        let pairs = synth_pairs(&opts, &small_head()).unwrap();
        for (stem, p) in layout.stems.iter().zip(&pairs) {
            let loaded = layout.load_pair(stem).unwrap();
            assert_eq!(loaded, p.to_labeled());
            assert_eq!(loaded.image1.shape(), &[3, 168, 168]);
        }

        std::fs::remove_file(layout.path("B", "synth_0001")).unwrap();
        match DatasetLayout::open(dir.path()) {
            Err(Error::Pair { stem, .. }) => assert_eq!(stem, "synth_0001"),
            other => panic!("expected a pair error, got {other:?}"),
        }
    }

    #[test]
    fn label_binarization_and_maps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.png");
        GrayImage::from_raw(3, 1, vec![0, 255, 7]).unwrap().save(&path).unwrap();
        assert_eq!(read_binary_map(&path).unwrap().data(), &[0, 1, 1]);

        let sem = SemanticMap::new(1, 3, vec![0, 4, 300]).unwrap();
        write_index_map(&path, &sem).unwrap();
        assert_eq!(read_index_map(&path).unwrap(), sem);
        let sem = SemanticMap::new(1, 3, vec![0, 4, 2]).unwrap();
        write_index_map(&path, &sem).unwrap();
        assert_eq!(read_index_map(&path).unwrap(), sem);
    }

    #[test]
    fn mismatched_sizes_name_the_stem() {
        let dir = tempfile::tempdir().unwrap();
        write_rgb(dir.path().join("A/x.png"), &Tensor::zeros(&[3, 4, 4])).unwrap();
        write_rgb(dir.path().join("B/x.png"), &Tensor::zeros(&[3, 4, 5])).unwrap();
        write_binary_map(dir.path().join("label/x.png"), &ChangeMap::zeros(4, 4)).unwrap();
        let layout = DatasetLayout::open(dir.path()).unwrap();
        match layout.load_pair("x") {
            Err(Error::Pair { stem, .. }) => assert_eq!(stem, "x"),
            other => panic!("expected a pair error, got {other:?}"),
        }
    }
}
