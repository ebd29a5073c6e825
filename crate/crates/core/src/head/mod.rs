//! The category-agnostic change head.
//!
//! Pipeline per pyramid level: feature modulation ([`fmm`]), difference
//! fusion ([`bdfm`]), difference-query window attention ([`edqa`]) and a
//! mixture of experts ([`moe`]); the four refined levels are decoded by
//! [`resup`] into 2-channel change logits at image resolution.

pub mod archive;
pub mod bdfm;
pub mod config;
pub mod edqa;
pub(crate) mod layers;
pub mod fmm;
pub mod moe;
pub mod resup;

pub use config::{HeadConfig, LEVELS};

use crate::backbone::RawFeatures;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::maps::ChangeMap;
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

/// Fresh parameters for `cfg`, seeded by `cfg.seed`.
pub fn init_params(cfg: &HeadConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let mut init = Init::new(cfg.seed);
    let mut store = ParamStore::new();
    fmm::init(&mut init, &mut store, cfg);
    bdfm::init(&mut init, &mut store, cfg);
    edqa::init(&mut init, &mut store, cfg);
    moe::init(&mut init, &mut store, cfg);
    resup::init(&mut init, &mut store, cfg);
    layers::add_conv(&mut init, &mut store, "sim.proj", cfg.channels.iter().sum(), cfg.embed_dim, 1);
    Ok(store)
}

/// Node handles for every intermediate of one forward pass.
#[derive(Debug)]
pub struct HeadOutputs {
    pub pyramid: [Vec<NodeId>; 2],
    pub attention: Vec<NodeId>,
    pub enhanced: Vec<[NodeId; 2]>,
    pub diffs: Vec<NodeId>,
    pub attn_weights: Vec<NodeId>,
    pub calibrated: Vec<NodeId>,
    pub gates: Vec<NodeId>,
    pub refined: Vec<NodeId>,
    pub logits: NodeId,
    pub aux: Vec<NodeId>,
    pub trajectory: Vec<NodeId>,
    pub embeddings: [NodeId; 2],
}

/// Similarity embedding for one timestamp: all levels resized to the finest
/// level, concatenated, projected to `embed_dim`, resized to the image.
pub fn similarity_embedding(
    g: &mut Graph,
    store: &ParamStore,
    pyramid: &[NodeId],
    out_h: usize,
    out_w: usize,
) -> Result<NodeId> {
    let (_, fh, fw) = g.value(pyramid[0]).dims3()?;
    let mut cat = pyramid[0];
    for &lvl in &pyramid[1..] {
        let aligned = g.bilinear(lvl, fh, fw)?;
        cat = g.concat(cat, aligned)?;
    }
    let e = layers::conv1(g, store, "sim.proj", cat)?;
    g.bilinear(e, out_h, out_w)
}

/// Builds the full head on `g` with the parameters in `store`.
pub fn forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &HeadConfig,
    raw: &RawFeatures,
    out_h: usize,
    out_w: usize,
) -> Result<HeadOutputs> {
    if raw.t1.len() != LEVELS || raw.t2.len() != LEVELS {
        return Err(Error::shape(format!(
            "the head consumes {LEVELS} tap layers, backbone gave {}",
            raw.t1.len()
        )));
    }
    let (gh, gw) = raw.grid()?;
    cfg.level_sizes(gh, gw)?;
    for t in raw.t1.iter() {
        if t.shape()[0] != cfg.feature_dim {
            return Err(Error::shape(format!(
                "backbone features have {} channels, head expects {}",
                t.shape()[0],
                cfg.feature_dim
            )));
        }
    }
    let r1 = raw.t1.iter().map(|t| g.input(t.clone())).collect::<Result<Vec<_>>>()?;
    let r2 = raw.t2.iter().map(|t| g.input(t.clone())).collect::<Result<Vec<_>>>()?;
    let pyramid = fmm::modulate_pair(g, store, cfg, &r1, &r2)?;

    let mut out = HeadOutputs {
        attention: Vec::with_capacity(LEVELS),
        enhanced: Vec::with_capacity(LEVELS),
        diffs: Vec::with_capacity(LEVELS),
        attn_weights: Vec::with_capacity(LEVELS),
        calibrated: Vec::with_capacity(LEVELS),
        gates: Vec::with_capacity(LEVELS),
        refined: Vec::with_capacity(LEVELS),
        logits: pyramid[0][0],
        aux: Vec::new(),
        trajectory: Vec::new(),
        embeddings: [pyramid[0][0]; 2],
        pyramid,
    };
    for k in 0..LEVELS {
        let (f1, f2) = (out.pyramid[0][k], out.pyramid[1][k]);
        let att = bdfm::attention(g, store, k, f1, f2)?;
        let fused = bdfm::fuse(g, store, k, f1, f2, att)?;
        let attended = edqa::attend(g, store, cfg, k, fused.diff, f1, f2)?;
        let calibrated = edqa::fuse(g, store, k, attended.d1, attended.d2)?;
        let mixed = moe::forward(g, store, cfg, k, calibrated)?;
        out.attention.push(att);
        out.enhanced.push([fused.x1, fused.x2]);
        out.diffs.push(fused.diff);
        out.attn_weights.push(attended.weights);
        out.calibrated.push(calibrated);
        out.gates.push(mixed.gate);
        out.refined.push(mixed.out);
    }
    let decoded = resup::decode(g, store, &out.refined, out_h, out_w)?;
    out.logits = decoded.logits;
    out.aux = decoded.aux;
    out.trajectory = decoded.trajectory;
    for t in 0..2 {
        let pyr = out.pyramid[t].clone();
        out.embeddings[t] = similarity_embedding(g, store, &pyr, out_h, out_w)?;
    }
    Ok(out)
}

/// A head configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ChangeHead {
    pub config: HeadConfig,
    pub params: ParamStore,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub logits: Tensor,
    pub aux: Vec<Tensor>,
    pub change: ChangeMap,
    pub embeddings: [Tensor; 2],
}

impl ChangeHead {
    pub fn new(config: HeadConfig) -> Result<Self> {
        let params = init_params(&config)?;
        Ok(Self { config, params })
    }

    pub fn learnable_count(&self) -> usize {
        self.params.learnable_count()
    }

    pub fn forward(&self, g: &mut Graph, raw: &RawFeatures, out_h: usize, out_w: usize) -> Result<HeadOutputs> {
        forward(g, &self.params, &self.config, raw, out_h, out_w)
    }

    pub fn predict(&self, raw: &RawFeatures, out_h: usize, out_w: usize) -> Result<Prediction> {
        let mut g = Graph::new();
        let o = self.forward(&mut g, raw, out_h, out_w)?;
        let logits = g.value(o.logits).clone();
        Ok(Prediction {
            change: ChangeMap::from_logits(&logits)?,
            logits,
            aux: o.aux.iter().map(|&a| g.value(a).clone()).collect(),
            embeddings: o.embeddings.map(|e| g.value(e).clone()),
        })
    }
}
