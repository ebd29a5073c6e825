//! Open-vocabulary composition: prompt grouping, change/semantic map
//! composition, a stand-in segmenter and the proposal-similarity baseline.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{ChangeMap, SemanticMap};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptClass {
    pub name: String,
    pub subclasses: Vec<String>,
    #[serde(default)]
    pub foreground: bool,
}

/// Canonical classes and their prompt vocabularies. Class `i` in
/// [`classes`](Self::classes) has map index `i + 1`; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    #[serde(rename = "class")]
    pub classes: Vec<PromptClass>,
}

const PRESETS: [(&str, &str); 4] = [
    ("whu-cd", include_str!("../presets/whu-cd.toml")),
    ("levir-cd", include_str!("../presets/levir-cd.toml")),
    ("dsifn", include_str!("../presets/dsifn.toml")),
    ("clcd", include_str!("../presets/clcd.toml")),
];

impl PromptConfig {
    pub fn new(classes: Vec<PromptClass>) -> Result<Self> {
        let cfg = Self { classes };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config("prompt config lists no classes".into()));
        }
        let mut seen = BTreeSet::new();
        for c in &self.classes {
            if c.subclasses.is_empty() {
                return Err(Error::Config(format!("class `{}` has no subclasses", c.name)));
            }
            for s in &c.subclasses {
                if !seen.insert(s.as_str()) {
                    return Err(Error::Config(format!("subclass `{s}` appears more than once")));
                }
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Built-in vocabularies: `whu-cd`, `levir-cd`, `dsifn`, `clcd`.
    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Config(format!("no prompt preset named `{name}`")))?;
        Self::from_toml(text)
    }

    pub fn preset_names() -> impl Iterator<Item = &'static str> {
        PRESETS.iter().map(|(n, _)| *n)
    }

    /// A file path, or `preset:<name>`.
    pub fn resolve(spec: &str) -> Result<Self> {
        match spec.strip_prefix("preset:") {
            Some(name) => Self::preset(name),
            None => Self::load(spec),
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn class_name(&self, index: u32) -> Option<&str> {
        match index {
            0 => Some("background"),
            i => self.classes.get(i as usize - 1).map(|c| c.name.as_str()),
        }
    }

    pub fn foreground(&self) -> BTreeSet<u32> {
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, c)| c.foreground)
            .map(|(i, _)| i as u32 + 1)
            .collect()
    }

    /// Every subclass prompt paired with its class index.
    pub fn subclasses(&self) -> Vec<(&str, u32)> {
        self.classes
            .iter()
            .enumerate()
            .flat_map(|(i, c)| c.subclasses.iter().map(move |s| (s.as_str(), i as u32 + 1)))
            .collect()
    }
}

fn same_grid(m_ca: &ChangeMap, m: &SemanticMap) -> Result<()> {
    m.expect_grid(m_ca.height(), m_ca.width())
}

/// A pixel changes iff the change map says so and either timestamp shows a
/// foreground class there.
pub fn compose_binary(m_ca: &ChangeMap, m1: &SemanticMap, m2: &SemanticMap, foreground: &BTreeSet<u32>) -> Result<ChangeMap> {
    same_grid(m_ca, m1)?;
    same_grid(m_ca, m2)?;
    let data = m_ca
        .data()
        .iter()
        .zip(m1.classes().iter().zip(m2.classes()))
        .map(|(&c, (a, b))| u8::from(c == 1 && (foreground.contains(a) || foreground.contains(b))))
        .collect();
    ChangeMap::new(m_ca.height(), m_ca.width(), data)
}

/// Keeps the class index where the change map is set, background elsewhere.
pub fn compose_semantic(m_ca: &ChangeMap, m: &SemanticMap) -> Result<SemanticMap> {
    same_grid(m_ca, m)?;
    let classes = m_ca
        .data()
        .iter()
        .zip(m.classes())
        .map(|(&c, &k)| if c == 1 { k } else { 0 })
        .collect();
    SemanticMap::new(m_ca.height(), m_ca.width(), classes)
}

/// Groups per-subclass score maps (`[H,W]` or `[1,H,W]`) into canonical
/// classes. Each pixel goes to the highest-scoring subclass, earlier maps
/// winning ties; pixels won by a non-foreground class become background.
pub fn group_prompts(scores: &[(&str, &Tensor)], cfg: &PromptConfig) -> Result<SemanticMap> {
    let owner: HashMap<&str, u32> = cfg.subclasses().into_iter().collect();
    let fg = cfg.foreground();
    let (first, _) = scores.first().ok_or_else(|| Error::invalid("no subclass score maps"))?;
    let grid = |t: &Tensor| -> Result<(usize, usize)> {
        match t.shape() {
            &[h, w] | &[1, h, w] => Ok((h, w)),
            s => Err(Error::shape(format!("score map must be [H,W] or [1,H,W], got {s:?}"))),
        }
    };
    let (h, w) = grid(scores[0].1)?;
    let mut classes = Vec::with_capacity(scores.len());
    for (name, t) in scores {
        let cls = *owner
            .get(name)
            .ok_or_else(|| Error::invalid(format!("subclass `{name}` is not in the prompt config")))?;
        if grid(t)? != (h, w) {
            return Err(Error::shape(format!("score map `{name}` does not share the grid of `{first}`")));
        }
        classes.push(if fg.contains(&cls) { cls } else { 0 });
    }
    let out = (0..h * w)
        .map(|p| {
            let mut best = 0;
            for (j, (_, t)) in scores.iter().enumerate().skip(1) {
                if t.data()[p] > scores[best].1.data()[p] {
                    best = j;
                }
            }
            classes[best]
        })
        .collect();
    SemanticMap::new(h, w, out)
}

/// Similarity threshold `cos(θ)` for an angle in degrees.
pub fn beta_threshold(theta_degrees: f64) -> Result<f64> {
    if !(0.0..=180.0).contains(&theta_degrees) {
        return Err(Error::invalid(format!("θ = {theta_degrees} is outside [0, 180]")));
    }
    Ok((theta_degrees * std::f64::consts::PI / 180.0).cos())
}

/// A candidate region with the mean embedding of each timestamp over it.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pixels: Vec<usize>,
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
}

impl Proposal {
    pub fn new(pixels: Vec<usize>, z1: Vec<f64>, z2: Vec<f64>) -> Result<Self> {
        if pixels.is_empty() {
            return Err(Error::invalid("proposal has no pixels"));
        }
        if z1.len() != z2.len() {
            return Err(Error::shape("proposal embeddings differ in length"));
        }
        Ok(Self { pixels, z1, z2 })
    }

    /// Averages `[E,H,W]` embeddings over the flat pixel indices.
    pub fn from_embeddings(pixels: Vec<usize>, emb1: &Tensor, emb2: &Tensor) -> Result<Self> {
        emb1.expect_same_shape(emb2, "proposal embeddings")?;
        let (e, h, w) = emb1.dims3()?;
        if let Some(p) = pixels.iter().find(|&&p| p >= h * w) {
            return Err(Error::shape(format!("pixel {p} outside a {h}x{w} grid")));
        }
        let mean = |t: &Tensor| -> Vec<f64> {
            (0..e)
                .map(|c| pixels.iter().map(|&p| t.data()[c * h * w + p]).sum::<f64>() / pixels.len() as f64)
                .collect()
        };
        let (z1, z2) = (mean(emb1), mean(emb2));
        Self::new(pixels, z1, z2)
    }

    /// Like [`from_embeddings`](Self::from_embeddings) for pixels of an
    /// `height × width` image whose embeddings live on a coarser `[E,gh,gw]`
    /// grid; each pixel reads its nearest grid cell.
    pub fn from_grid(pixels: Vec<usize>, height: usize, width: usize, grid1: &Tensor, grid2: &Tensor) -> Result<Self> {
        grid1.expect_same_shape(grid2, "proposal embeddings")?;
        let (e, gh, gw) = grid1.dims3()?;
        if let Some(p) = pixels.iter().find(|&&p| p >= height * width) {
            return Err(Error::shape(format!("pixel {p} outside a {height}x{width} grid")));
        }
        let mut z1 = vec![0.0; e];
        let mut z2 = vec![0.0; e];
        for &p in &pixels {
            let cell = (p / width * gh / height) * gw + (p % width) * gw / width;
            for c in 0..e {
                z1[c] += grid1.data()[c * gh * gw + cell];
                z2[c] += grid2.data()[c * gh * gw + cell];
            }
        }
        let n = pixels.len().max(1) as f64;
        z1.iter_mut().chain(z2.iter_mut()).for_each(|v| *v /= n);
        Self::new(pixels, z1, z2)
    }

    pub fn pixels(&self) -> &[usize] {
        &self.pixels
    }

    /// Cosine similarity of the two mean embeddings; 0 if either vanishes.
    pub fn similarity(&self) -> f64 {
        let dot: f64 = self.z1.iter().zip(&self.z2).map(|(a, b)| a * b).sum();
        let n1 = self.z1.iter().map(|v| v * v).sum::<f64>();
        let n2 = self.z2.iter().map(|v| v * v).sum::<f64>();
        if n1 == 0.0 || n2 == 0.0 {
            0.0
        } else {
            (dot / (n1 * n2).sqrt()).clamp(-1.0, 1.0)
        }
    }

    /// Negated similarity.
    pub fn distance(&self) -> f64 {
        -self.similarity()
    }
}

/// Union of the proposals whose embeddings are further apart than `θ`
/// degrees, i.e. whose cosine similarity falls below `cos θ`.
pub fn baseline_compare(proposals: &[Proposal], theta_degrees: f64, height: usize, width: usize) -> Result<ChangeMap> {
    let beta = beta_threshold(theta_degrees)?;
    let mut data = vec![0u8; height * width];
    for p in proposals {
        if p.similarity() < beta {
            for &i in p.pixels() {
                *data.get_mut(i).ok_or_else(|| Error::shape(format!("pixel {i} outside the grid")))? = 1;
            }
        }
    }
    ChangeMap::new(height, width, data)
}

/// 4-connected regions of equal non-zero class, in raster order of their
/// first pixel.
pub fn connected_components(map: &SemanticMap) -> Vec<Vec<usize>> {
    let (h, w) = (map.height(), map.width());
    let cls = map.classes();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if seen[start] || cls[start] == 0 {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut region = Vec::new();
        while let Some(p) = stack.pop() {
            region.push(p);
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if !seen[q] && cls[q] == cls[start] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        region.sort_unstable();
        out.push(region);
    }
    out
}

/// Seeded RGB prototype in `[0,1]³` for every subclass prompt.
pub fn mock_prototypes(cfg: &PromptConfig, seed: u64) -> Vec<(String, [f64; 3])> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cfg.subclasses()
        .into_iter()
        .map(|(s, _)| (s.to_string(), [rng.random(), rng.random(), rng.random()]))
        .collect()
}

/// Rule-based stand-in segmenter: every pixel takes the subclass whose
/// colour prototype is nearest, then subclasses are grouped into classes.
pub fn mock_segment(image: &Tensor, cfg: &PromptConfig, seed: u64) -> Result<SemanticMap> {
    cfg.validate()?;
    if cfg.foreground().is_empty() {
        return Err(Error::Config("prompt config has no foreground class".into()));
    }
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::shape(format!("expected a 3-channel image, got {c}")));
    }
    let protos = mock_prototypes(cfg, seed);
    let hw = h * w;
    let scores: Vec<(String, Tensor)> = protos
        .into_iter()
        .map(|(name, rgb)| {
            let t = Tensor::from_fn(&[h, w], |p| {
                -(0..3).map(|ch| (image.data()[ch * hw + p] - rgb[ch]).powi(2)).sum::<f64>()
            });
            (name, t)
        })
        .collect();
    let refs: Vec<(&str, &Tensor)> = scores.iter().map(|(n, t)| (n.as_str(), t)).collect();
    group_prompts(&refs, cfg)
}

/// Where semantic maps come from.
#[derive(Clone, Debug, PartialEq)]
pub enum Segmenter {
    Mock { seed: u64 },
    /// Precomputed single-channel index image, returned verbatim.
    Precomputed(std::path::PathBuf),
}

impl Segmenter {
    pub fn segment(&self, image: &Tensor, cfg: &PromptConfig) -> Result<SemanticMap> {
        match self {
            Segmenter::Mock { seed } => mock_segment(image, cfg, *seed),
            Segmenter::Precomputed(path) => crate::data::read_index_map(path),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cmap(v: &[u8]) -> ChangeMap {
        ChangeMap::new(1, v.len(), v.to_vec()).unwrap()
    }

    fn smap(v: &[u32]) -> SemanticMap {
        SemanticMap::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn presets_parse_and_mark_foreground() {
        for name in PromptConfig::preset_names() {
            PromptConfig::preset(name).unwrap();
        }
        let whu = PromptConfig::preset("whu-cd").unwrap();
        assert_eq!(whu.foreground().len(), 1);
        let b = whu.class_names().iter().position(|n| n == "building").unwrap() as u32 + 1;
        assert!(whu.foreground().contains(&b));
        let clcd = PromptConfig::preset("clcd").unwrap();
        assert_eq!(clcd.foreground().len(), 5);
        assert!(PromptConfig::preset("nope").is_err());
    }

    #[test]
    fn duplicate_subclass_rejected() {
        let text = "[[class]]\nname='a'\nsubclasses=['x']\n[[class]]\nname='b'\nsubclasses=['x']\n";
        assert!(PromptConfig::from_toml(text).is_err());
    }

    #[test]
    fn compose_binary_truth_table() {
        let fg = BTreeSet::from([1]);
        let out = compose_binary(&cmap(&[1, 1, 0, 0]), &smap(&[1, 0, 1, 0]), &smap(&[0, 0, 1, 1]), &fg).unwrap();
        assert_eq!(out.data(), &[1, 0, 0, 0]);
        let zero = compose_binary(&cmap(&[0, 0]), &smap(&[1, 1]), &smap(&[1, 1]), &fg).unwrap();
        assert_eq!(zero.changed(), 0);
        let ca = cmap(&[1, 0, 1]);
        assert_eq!(compose_binary(&ca, &smap(&[1, 1, 1]), &smap(&[1, 1, 1]), &fg).unwrap(), ca);
        assert!(compose_binary(&ca, &smap(&[1, 1]), &smap(&[1, 1, 1]), &fg).is_err());
    }

    #[test]
    fn compose_semantic_cases() {
        let m = smap(&[3, 0, 2, 5]);
        assert_eq!(compose_semantic(&cmap(&[1; 4]), &m).unwrap(), m);
        assert_eq!(compose_semantic(&cmap(&[0; 4]), &m).unwrap().classes(), &[0; 4]);
        assert_eq!(compose_semantic(&cmap(&[1, 1, 0, 0]), &m).unwrap().classes(), &[3, 0, 0, 0]);
    }

    #[test]
    fn grouping() {
        let cfg = PromptConfig::preset("whu-cd").unwrap();
        let building = cfg.class_names().iter().position(|n| n == "building").unwrap() as u32 + 1;
        let roof = Tensor::new(vec![1, 2], vec![0.9, 0.1]).unwrap();
        let car = Tensor::new(vec![1, 2], vec![0.2, 0.8]).unwrap();
        let m = group_prompts(&[("roof", &roof), ("car", &car)], &cfg).unwrap();
        assert_eq!(m.classes(), &[building, 0]);
        assert!(group_prompts(&[("boat", &roof)], &cfg).is_err());

        let single = PromptConfig::new(vec![
            PromptClass {
                name: "a".into(),
                subclasses: vec!["a".into()],
                foreground: true,
            },
            PromptClass {
                name: "b".into(),
                subclasses: vec!["b".into()],
                foreground: true,
            },
        ])
        .unwrap();
        let sa = Tensor::new(vec![3], vec![0.0; 3]).unwrap();
        assert!(group_prompts(&[("a", &sa)], &single).is_err());
        let sa = Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.5]).unwrap();
        let sb = Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.5]).unwrap();
        assert_eq!(group_prompts(&[("a", &sa), ("b", &sb)], &single).unwrap().classes(), &[1, 2, 1]);
    }

    #[test]
    fn beta_values() {
        assert_eq!(beta_threshold(0.0).unwrap(), 1.0);
        assert!(beta_threshold(90.0).unwrap().abs() < 1e-12);
        assert!((beta_threshold(60.0).unwrap() - 0.5).abs() < 1e-12);
        assert!(beta_threshold(-1.0).is_err() && beta_threshold(180.5).is_err());
    }

    #[test]
    fn baseline_examples() {
        let same = Proposal::new(vec![0], vec![1.0, 2.0], vec![1.0, 2.0]).unwrap();
        assert_eq!(same.distance(), -1.0);
        assert_eq!(baseline_compare(&[same], 90.0, 1, 2).unwrap().data(), &[0, 0]);
        let anti = Proposal::new(vec![1], vec![1.0, 2.0], vec![-1.0, -2.0]).unwrap();
        assert_eq!(baseline_compare(&[anti], 179.0, 1, 2).unwrap().data(), &[0, 1]);
        let ortho = Proposal::new(vec![0, 1], vec![1.0, 0.0], vec![0.0, 3.0]).unwrap();
        assert_eq!(baseline_compare(&[ortho], 60.0, 1, 2).unwrap().data(), &[1, 1]);
        assert_eq!(baseline_compare(&[], 60.0, 2, 2).unwrap().changed(), 0);
        assert!(Proposal::new(vec![], vec![1.0], vec![1.0]).is_err());
    }

    #[test]
    fn proposal_means() {
        let e1 = Tensor::from_fn(&[2, 2, 2], |i| i as f64);
        let e2 = e1.scale(2.0);
        let p = Proposal::from_embeddings(vec![0, 3], &e1, &e2).unwrap();
        assert_eq!(p.z1, vec![1.5, 5.5]);
        assert!((p.similarity() - 1.0).abs() < 1e-12);
        assert!(Proposal::from_embeddings(vec![4], &e1, &e2).is_err());
    }

    #[test]
    fn components_are_four_connected() {
        let m = SemanticMap::new(3, 3, vec![1, 0, 1, 0, 1, 0, 2, 2, 0]).unwrap();
        let cc = connected_components(&m);
        assert_eq!(cc, vec![vec![0], vec![2], vec![4], vec![6, 7]]);
    }

    #[test]
    fn mock_segmenter() {
        let cfg = PromptConfig::preset("whu-cd").unwrap();
        let protos = mock_prototypes(&cfg, 4);
        let (_, roof) = protos.iter().find(|(n, _)| n == "roof").unwrap();
        let img = Tensor::from_fn(&[3, 4, 5], |i| roof[i / 20]);
        let m = mock_segment(&img, &cfg, 4).unwrap();
        let building = cfg.class_names().iter().position(|n| n == "building").unwrap() as u32 + 1;
        assert!(m.classes().iter().all(|&c| c == building));
        assert_eq!(mock_segment(&img, &cfg, 4).unwrap(), m);

        let mut none = cfg.clone();
        none.classes.iter_mut().for_each(|c| c.foreground = false);
        assert!(mock_segment(&img, &none, 4).is_err());
    }

    proptest! {
        #[test]
        fn compose_semantic_selects(mask in proptest::collection::vec(0u8..2, 16), cls in proptest::collection::vec(0u32..6, 16)) {
            let out = compose_semantic(&cmap(&mask), &smap(&cls)).unwrap();
            for (i, &o) in out.classes().iter().enumerate() {
                prop_assert!(o == 0 || o == cls[i]);
                prop_assert_eq!(o, cls[i] * mask[i] as u32);
            }
        }

        #[test]
        fn baseline_scale_invariant(z1 in proptest::collection::vec(-5.0f64..5.0, 4), z2 in proptest::collection::vec(-5.0f64..5.0, 4), a in 0.1f64..10.0, b in 0.1f64..10.0, theta in 0.0f64..180.0) {
            let p = Proposal::new(vec![0], z1.clone(), z2.clone()).unwrap();
            let q = Proposal::new(
                vec![0],
                z1.iter().map(|v| v * a).collect(),
                z2.iter().map(|v| v * b).collect(),
            ).unwrap();
            let beta = beta_threshold(theta).unwrap();
            // decisions can only differ within rounding of the threshold
            prop_assume!((p.similarity() - beta).abs() > 1e-12);
            prop_assert_eq!(
                baseline_compare(&[p], theta, 1, 1).unwrap(),
                baseline_compare(&[q], theta, 1, 1).unwrap()
            );
        }
    }
}
