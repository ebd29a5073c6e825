//! Command-line front end. Every command writes its artifacts under
//! `--out` together with `manifest.json`, which lists the inputs, seeds and
//! SHA-256 hashes of everything read and written.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use image::{DynamicImage, GrayImage};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, BackboneConfig, BackboneSelector};
use crate::config::RunConfig;
use crate::data::{self, DatasetLayout, SynthOptions};
use crate::error::{Error, Result};
use crate::head::{archive, ChangeHead, HeadConfig};
use crate::maps::{ChangeMap, SemanticMap};
use crate::metrics::{confusion, multiclass_metrics, Confusion, MacroMode, MetricsReport};
use crate::pipeline::{self, PromptConfig, Proposal, Segmenter};
use crate::render;
use crate::tensor::Tensor;
use crate::training::{self, EpochRecord};

#[derive(Debug, Parser)]
#[command(name = "ovcd", version, about = "Category-agnostic change detection toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the change head on a labelled dataset.
    Train(TrainArgs),
    /// Predict binary change maps with a trained checkpoint.
    Infer(InferArgs),
    /// Produce semantic maps with the stand-in segmenter.
    Segment(SegmentArgs),
    /// Combine change maps with semantic maps.
    Compose(ComposeArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Cut an image into sliding-window tiles.
    Tile(TileArgs),
    /// Generate a synthetic bi-temporal dataset.
    Synth(SynthArgs),
    /// Proposal-similarity baseline change map.
    Baseline(BaselineArgs),
    /// Colour-render a change or semantic map.
    Render(RenderArgs),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    #[default]
    Full,
    Reduced,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model sizes used when no config file is given.
    #[arg(long, value_enum, default_value_t = Preset::Full)]
    pub preset: Preset,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `mock:<seed>` or `external:<dir>`.
    #[arg(long)]
    pub backbone: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset root; every stem under `A/` is predicted.
    #[arg(long, conflicts_with_all = ["a", "b"])]
    pub data: Option<PathBuf>,
    #[arg(long, requires = "b")]
    pub a: Option<PathBuf>,
    #[arg(long, requires = "a")]
    pub b: Option<PathBuf>,
    /// Defaults to the mock backbone stored in the checkpoint.
    #[arg(long)]
    pub backbone: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long, conflicts_with = "data")]
    pub image: Vec<PathBuf>,
    /// Dataset root; both `A/` and `B/` are segmented.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Prompt config file or `preset:<name>`.
    #[arg(long)]
    pub prompts: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use this class-index map instead of the mock segmenter.
    #[arg(long, requires = "image")]
    pub precomputed: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ComposeArgs {
    /// Change map file, or a directory of them.
    #[arg(long)]
    pub change: PathBuf,
    #[arg(long)]
    pub sem1: PathBuf,
    #[arg(long)]
    pub sem2: PathBuf,
    #[arg(long)]
    pub prompts: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Binary predictions (file or directory).
    #[arg(long, requires = "gt")]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long, requires_all = ["pred_b", "gt_a", "gt_b", "prompts"], conflicts_with = "pred")]
    pub pred_a: Option<PathBuf>,
    #[arg(long)]
    pub pred_b: Option<PathBuf>,
    #[arg(long)]
    pub gt_a: Option<PathBuf>,
    #[arg(long)]
    pub gt_b: Option<PathBuf>,
    #[arg(long)]
    pub prompts: Option<String>,
    /// `per-class` or `pooled`.
    #[arg(long, default_value = "per-class")]
    pub macro_mode: MacroMode,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TileArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = 512)]
    pub window: usize,
    #[arg(long, default_value_t = 512)]
    pub stride: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 168)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 14)]
    pub patch_size: usize,
    /// Attention window the data must suit.
    #[arg(long, default_value_t = 3)]
    pub window: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub prompts: String,
    /// Angle threshold in degrees.
    #[arg(long, default_value_t = 60.0)]
    pub theta: f64,
    #[arg(long, default_value = "mock:0")]
    pub backbone: String,
    #[arg(long, value_enum, default_value_t = Preset::Full)]
    pub preset: Preset,
    #[arg(long, default_value_t = 0)]
    pub segmenter_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long, conflicts_with = "semantic")]
    pub change: Option<PathBuf>,
    #[arg(long, requires = "prompts")]
    pub semantic: Option<PathBuf>,
    #[arg(long)]
    pub prompts: Option<String>,
    /// Optional backdrop image.
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct FileHash {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest {
    command: String,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
}

fn sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn files_under(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        out.extend(files_under(&p)?);
    }
    Ok(out)
}

/// Output directory plus the manifest being assembled for it.
struct Run {
    out: PathBuf,
    manifest: Manifest,
}

impl Run {
    fn new(command: &str, out: &Path) -> Result<Self> {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        Ok(Self {
            out: out.to_path_buf(),
            manifest: Manifest {
                command: command.into(),
                seeds: BTreeMap::new(),
                inputs: Vec::new(),
                outputs: Vec::new(),
            },
        })
    }

    fn seed(&mut self, name: &str, value: u64) {
        self.manifest.seeds.insert(name.into(), value);
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        for f in files_under(path)? {
            let bytes = std::fs::read(&f).map_err(|e| Error::io(&f, e))?;
            self.manifest.inputs.push(FileHash {
                path: f.display().to_string(),
                sha256: sha256(&bytes),
            });
        }
        Ok(())
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn record(&mut self, rel: &str) -> Result<()> {
        let path = self.path(rel);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.manifest.outputs.push(FileHash {
            path: rel.into(),
            sha256: sha256(&bytes),
        });
        Ok(())
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.record(rel)
    }

    fn change_map(&mut self, rel: &str, m: &ChangeMap) -> Result<()> {
        data::write_binary_map(self.path(rel), m)?;
        self.record(rel)
    }

    fn index_map(&mut self, rel: &str, m: &SemanticMap) -> Result<()> {
        data::write_index_map(self.path(rel), m)?;
        self.record(rel)
    }

    fn rgb(&mut self, rel: &str, t: &Tensor) -> Result<()> {
        data::write_rgb(self.path(rel), t)?;
        self.record(rel)
    }

    fn finish(self) -> Result<()> {
        let json = serde_json::to_vec_pretty(&self.manifest)?;
        let path = self.out.join("manifest.json");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}

fn stem_of(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| Error::invalid(format!("{} has no file stem", path.display())))
}

/// `(stem, path)` for a single PNG or every PNG in a directory.
fn png_entries(path: &Path) -> Result<Vec<(String, PathBuf)>> {
    if path.is_dir() {
        files_under(path)?
            .into_iter()
            .filter(|p| p.parent() == Some(path) && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .map(|p| Ok((stem_of(&p)?, p)))
            .collect()
    } else {
        Ok(vec![(stem_of(path)?, path.to_path_buf())])
    }
}

/// Same-stem counterpart of `stem` under `path` when `path` is a directory.
fn counterpart(path: &Path, stem: &str) -> PathBuf {
    if path.is_dir() {
        path.join(format!("{stem}.png"))
    } else {
        path.to_path_buf()
    }
}

pub fn epoch_line(r: &EpochRecord) -> String {
    format!(
        "epoch {:>3} step {:>5}  L_cd {:.5}  L_ups {:.5}  L_sim {:.5}  L_total {:.5}  IoU {:.4}",
        r.epoch, r.step, r.l_cd, r.l_ups, r.l_sim, r.l_total, r.iou_c
    )
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => match a.preset {
            Preset::Full => RunConfig::default(),
            Preset::Reduced => RunConfig::reduced(),
        },
    };
    if let Some(d) = a.data {
        cfg.data.train = Some(d);
    }
    if let Some(o) = a.out {
        cfg.out = Some(o);
    }
    if let Some(b) = a.backbone {
        cfg.backbone_source = b;
    }
    if a.seed.is_some() {
        cfg.seed = a.seed;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(bs) = a.batch_size {
        cfg.train.batch_size = bs;
    }
    if a.max_steps.is_some() {
        cfg.max_steps = a.max_steps;
    }
    cfg.check_paths()?;
    let cfg = cfg.resolved()?;
    let data_dir = cfg.data.train.clone().ok_or_else(|| Error::Config("no training data given".into()))?;
    let out = cfg.out.clone().ok_or_else(|| Error::Config("no output directory given".into()))?;

    let mut run = Run::new("train", &out)?;
    if let Some(p) = &a.config {
        run.input(p)?;
    }
    run.input(&data_dir)?;
    let selector: BackboneSelector = cfg.backbone_source.parse()?;
    let backbone = Backbone::from_selector(&selector, cfg.backbone.clone())?;
    run.seed("backbone", backbone.config().seed);
    run.seed("head", cfg.head.seed);
    run.seed("train", cfg.train.seed);

    let layout = DatasetLayout::open(&data_dir)?;
    let pairs = layout.load_all()?;
    let features = training::cache_features(&pairs, &backbone)?;
    let head = ChangeHead::new(cfg.head.clone())?;
    let outcome = training::train(&pairs, head, &features, &cfg.train, &cfg.loss, cfg.max_steps, |r| {
        eprintln!("{}", epoch_line(r))
    })?;

    run.write("checkpoint.s2ca", &archive::to_bytes(&outcome.head, Some(backbone.config()))?)?;
    let mut log = Vec::new();
    for r in &outcome.epochs {
        serde_json::to_writer(&mut log, r)?;
        log.push(b'\n');
    }
    run.write("train_log.jsonl", &log)?;
    let mut effective = cfg.clone();
    effective.backbone = backbone.config().clone();
    effective.out = None;
    run.write("config.toml", effective.to_toml()?.as_bytes())?;
    run.finish()
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let mut run = Run::new("infer", &a.out)?;
    run.input(&a.checkpoint)?;
    let ckpt = archive::load(&a.checkpoint)?;
    let bb_cfg = ckpt.backbone.clone().unwrap_or_default();
    let selector = match &a.backbone {
        Some(s) => s.parse()?,
        None => BackboneSelector::Mock { seed: bb_cfg.seed },
    };
    let backbone = Backbone::from_selector(&selector, bb_cfg)?;
    run.seed("backbone", backbone.config().seed);

    let jobs: Vec<(String, Tensor, Tensor)> = match (&a.data, &a.a, &a.b) {
        (Some(root), _, _) => {
            run.input(&root.join("A"))?;
            run.input(&root.join("B"))?;
            let layout = DatasetLayout::open(root)?;
            layout
                .stems
                .iter()
                .map(|s| layout.load_images(s).map(|(i1, i2)| (s.clone(), i1, i2)))
                .collect::<Result<_>>()?
        }
        (None, Some(p1), Some(p2)) => {
            run.input(p1)?;
            run.input(p2)?;
            vec![(stem_of(p1)?, data::read_rgb(p1)?, data::read_rgb(p2)?)]
        }
        _ => return Err(Error::invalid("give either --data or both --a and --b")),
    };
    for (stem, i1, i2) in jobs {
        let (_, h, w) = i1.dims3()?;
        let feats = training::pair_features(&backbone, &stem, &i1, &i2)?;
        let pred = ckpt.head.predict(&feats, h, w)?;
        run.change_map(&format!("{stem}.png"), &pred.change)?;
    }
    run.finish()
}

fn cmd_segment(a: SegmentArgs) -> Result<()> {
    let prompts = PromptConfig::resolve(&a.prompts)?;
    let mut run = Run::new("segment", &a.out)?;
    if !a.prompts.starts_with("preset:") {
        run.input(Path::new(&a.prompts))?;
    }
    let segmenter = match &a.precomputed {
        Some(p) => {
            run.input(p)?;
            Segmenter::Precomputed(p.clone())
        }
        None => {
            run.seed("segmenter", a.seed);
            Segmenter::Mock { seed: a.seed }
        }
    };
    let mut jobs: Vec<(String, PathBuf)> = Vec::new();
    if let Some(root) = &a.data {
        let layout = DatasetLayout::open(root)?;
        for dir in ["A", "B"] {
            for s in &layout.stems {
                jobs.push((format!("{dir}/{s}.png"), layout.path(dir, s)));
            }
        }
    } else if a.image.is_empty() {
        return Err(Error::invalid("give --image or --data"));
    } else {
        for p in &a.image {
            jobs.push((format!("{}.png", stem_of(p)?), p.clone()));
        }
    }
    for (rel, path) in jobs {
        run.input(&path)?;
        let image = data::read_rgb(&path)?;
        let map = segmenter.segment(&image, &prompts)?;
        run.index_map(&rel, &map)?;
    }
    run.finish()
}

fn cmd_compose(a: ComposeArgs) -> Result<()> {
    let prompts = PromptConfig::resolve(&a.prompts)?;
    let fg = prompts.foreground();
    let mut run = Run::new("compose", &a.out)?;
    for (stem, path) in png_entries(&a.change)? {
        let (p1, p2) = (counterpart(&a.sem1, &stem), counterpart(&a.sem2, &stem));
        for p in [&path, &p1, &p2] {
            run.input(p)?;
        }
        let m_ca = data::read_binary_map(&path)?;
        let m1 = data::read_index_map(&p1)?;
        let m2 = data::read_index_map(&p2)?;
        run.change_map(&format!("{stem}_ch.png"), &pipeline::compose_binary(&m_ca, &m1, &m2, &fg)?)?;
        run.index_map(&format!("{stem}_ch1.png"), &pipeline::compose_semantic(&m_ca, &m1)?)?;
        run.index_map(&format!("{stem}_ch2.png"), &pipeline::compose_semantic(&m_ca, &m2)?)?;
    }
    run.finish()
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut run = Run::new("eval", &a.out)?;
    let report = if let (Some(pred), Some(gt)) = (&a.pred, &a.gt) {
        let mut total = Confusion::default();
        for (stem, g) in png_entries(gt)? {
            let p = counterpart(pred, &stem);
            run.input(&p)?;
            run.input(&g)?;
            total += confusion(&data::read_binary_map(&p)?, &data::read_binary_map(&g)?)?;
        }
        MetricsReport::binary(&total)?
    } else if let (Some(pa), Some(pb), Some(ga), Some(gb), Some(pr)) = (&a.pred_a, &a.pred_b, &a.gt_a, &a.gt_b, &a.prompts) {
        let prompts = PromptConfig::resolve(pr)?;
        let mut cat: [Vec<u32>; 4] = Default::default();
        let mut width = None;
        for (stem, g1) in png_entries(ga)? {
            let paths = [counterpart(pa, &stem), counterpart(pb, &stem), g1, counterpart(gb, &stem)];
            for (k, p) in paths.iter().enumerate() {
                run.input(p)?;
                let m = data::read_index_map(p)?;
                if *width.get_or_insert(m.width()) != m.width() {
                    return Err(Error::shape("semantic maps must share one width"));
                }
                cat[k].extend_from_slice(m.classes());
            }
        }
        let w = width.ok_or_else(|| Error::invalid("no ground-truth maps found"))?;
        let maps: Vec<SemanticMap> = cat
            .into_iter()
            .map(|c| SemanticMap::new(c.len() / w, w, c))
            .collect::<Result<_>>()?;
        multiclass_metrics([&maps[0], &maps[1]], [&maps[2], &maps[3]], &prompts.class_names(), a.macro_mode)?
    } else {
        return Err(Error::invalid("give --pred/--gt or --pred-a/--pred-b/--gt-a/--gt-b/--prompts"));
    };
    let text = report.to_text();
    print!("{text}");
    run.write("report.txt", text.as_bytes())?;
    run.write("report.json", report.to_json()?.as_bytes())?;
    run.finish()
}

fn cmd_tile(a: TileArgs) -> Result<()> {
    let mut run = Run::new("tile", &a.out)?;
    run.input(&a.image)?;
    let stem = stem_of(&a.image)?;
    let img = image::open(&a.image).map_err(|e| Error::Image {
        path: a.image.clone(),
        source: e,
    })?;
    let gray = matches!(img, DynamicImage::ImageLuma8(_));
    let t = if gray {
        let g = img.to_luma8();
        let (w, h) = (g.width() as usize, g.height() as usize);
        Tensor::new(vec![1, h, w], g.into_raw().into_iter().map(|v| v as f64).collect())?
    } else {
        data::rgb_to_tensor(&img.to_rgb8())
    };
    let tiles = data::tile(&t, a.window, a.stride)?;
    let mut placements = Vec::new();
    for (p, tile) in &tiles {
        let rel = format!("{stem}_y{}_x{}.png", p.y, p.x);
        if gray {
            let raw = tile.data().iter().map(|&v| v as u8).collect();
            let path = run.path(&rel);
            GrayImage::from_raw(p.size as u32, p.size as u32, raw)
                .expect("buffer matches dimensions")
                .save(&path)
                .map_err(|e| Error::Image { path, source: e })?;
            run.record(&rel)?;
        } else {
            run.rgb(&rel, tile)?;
        }
        placements.push(serde_json::json!({ "file": rel, "y": p.y, "x": p.x, "size": p.size }));
    }
    run.write("tiles.json", &serde_json::to_vec_pretty(&placements)?)?;
    run.finish()
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let opts = SynthOptions {
        n: a.n,
        size: a.size,
        seed: a.seed,
        patch_size: a.patch_size,
    };
    let head = HeadConfig {
        window: a.window,
        ..HeadConfig::reduced()
    };
    let mut run = Run::new("synth", &a.out)?;
    run.seed("synth", a.seed);
    let layout = data::synth_dataset(&a.out, &opts, &head)?;
    for stem in &layout.stems {
        for dir in ["A", "B", "label"] {
            run.record(&format!("{dir}/{stem}.png"))?;
        }
    }
    run.finish()
}

fn cmd_baseline(a: BaselineArgs) -> Result<()> {
    let prompts = PromptConfig::resolve(&a.prompts)?;
    let mut run = Run::new("baseline", &a.out)?;
    run.input(&a.a)?;
    run.input(&a.b)?;
    let cfg = match a.preset {
        Preset::Full => BackboneConfig::default(),
        Preset::Reduced => BackboneConfig::reduced(),
    };
    let backbone = Backbone::from_selector(&a.backbone.parse()?, cfg)?;
    run.seed("backbone", backbone.config().seed);
    run.seed("segmenter", a.segmenter_seed);

    let stem = stem_of(&a.a)?;
    let (i1, i2) = (data::read_rgb(&a.a)?, data::read_rgb(&a.b)?);
    let (_, h, w) = i1.dims3()?;
    let feats = training::pair_features(&backbone, &stem, &i1, &i2)?;
    let (z1, z2) = (feats.t1.last(), feats.t2.last());
    let (z1, z2) = z1.zip(z2).ok_or_else(|| Error::shape("backbone produced no features"))?;
    let mut proposals = Vec::new();
    for img in [&i1, &i2] {
        let seg = pipeline::mock_segment(img, &prompts, a.segmenter_seed)?;
        for region in pipeline::connected_components(&seg) {
            proposals.push(Proposal::from_grid(region, h, w, z1, z2)?);
        }
    }
    let map = pipeline::baseline_compare(&proposals, a.theta, h, w)?;
    run.change_map(&format!("{stem}.png"), &map)?;
    run.finish()
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let mut run = Run::new("render", &a.out)?;
    let backdrop = match &a.image {
        Some(p) => {
            run.input(p)?;
            Some(data::read_rgb(p)?)
        }
        None => None,
    };
    let (stem, img) = match (&a.change, &a.semantic, &a.prompts) {
        (Some(p), _, _) => {
            run.input(p)?;
            (stem_of(p)?, render::render_change(&data::read_binary_map(p)?, backdrop.as_ref())?)
        }
        (None, Some(p), Some(pr)) => {
            run.input(p)?;
            let prompts = PromptConfig::resolve(pr)?;
            let map = data::read_index_map(p)?;
            (stem_of(p)?, render::render_semantic(&map, &prompts, backdrop.as_ref())?)
        }
        _ => return Err(Error::invalid("give --change, or --semantic with --prompts")),
    };
    run.rgb(&format!("{stem}_render.png"), &img)?;
    run.finish()
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Segment(a) => cmd_segment(a),
        Command::Compose(a) => cmd_compose(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Tile(a) => cmd_tile(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Render(a) => cmd_render(a),
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run_from<I, T>(args: I) -> std::result::Result<(), clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    execute(cli).map_err(|e| clap::Error::raw(clap::error::ErrorKind::Io, format!("{e}\n")))
}
