//! Difference-query window attention.
//!
//! Queries and keys come from the fused difference `D`; values come from
//! per-timestamp guidance `G_t = conv1(D ‖ F_t)`. Attention runs inside
//! non-overlapping `S × S` windows with a learned relative-position bias
//! per head, and the two calibrated maps are fused by two 3×3 convs.

use super::config::{HeadConfig, LEVELS};
use super::layers::{add_conv, add_linear, conv1, conv3, linear};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{Init, ParamStore};

pub(crate) fn init(init: &mut Init, store: &mut ParamStore, cfg: &HeadConfig) {
    let span = 2 * cfg.window - 1;
    for k in 0..LEVELS {
        let c = cfg.channels[k];
        add_conv(init, store, &format!("edqa.{k}.guide"), 2 * c, c, 1);
        add_linear(init, store, &format!("edqa.{k}.q"), c, c, 1.0);
        add_linear(init, store, &format!("edqa.{k}.k"), c, c, 1.0);
        for t in 1..=2 {
            add_linear(init, store, &format!("edqa.{k}.v{t}"), c, c, 1.0);
            add_linear(init, store, &format!("edqa.{k}.proj{t}"), c, c, 1.0);
        }
        store.insert(
            format!("edqa.{k}.rel_bias"),
            init.normal(&[span * span, cfg.heads], 0.02),
        );
        add_conv(init, store, &format!("edqa.{k}.fuse1"), 2 * c, c, 3);
        add_conv(init, store, &format!("edqa.{k}.fuse2"), c, c, 3);
    }
}

pub struct Attended {
    pub d1: NodeId,
    pub d2: NodeId,
    /// Softmax weights, `[N_w·heads, S², S²]`, shared by both timestamps.
    pub weights: NodeId,
}

/// `[N_w, T, C]` → `[N_w·heads, T, C/heads]`.
fn split_heads(g: &mut Graph, x: NodeId, heads: usize) -> Result<NodeId> {
    let (n, t, c) = match g.value(x).shape() {
        &[n, t, c] => (n, t, c),
        s => return Err(Error::shape(format!("expected window tokens, got {s:?}"))),
    };
    let r = g.reshape(x, &[n, t, heads, c / heads])?;
    let p = g.permute(r, &[0, 2, 1, 3])?;
    g.reshape(p, &[n * heads, t, c / heads])
}

fn merge_heads(g: &mut Graph, x: NodeId, heads: usize) -> Result<NodeId> {
    let (nh, t, d) = match g.value(x).shape() {
        &[nh, t, d] => (nh, t, d),
        s => return Err(Error::shape(format!("expected per-head tokens, got {s:?}"))),
    };
    let r = g.reshape(x, &[nh / heads, heads, t, d])?;
    let p = g.permute(r, &[0, 2, 1, 3])?;
    g.reshape(p, &[nh / heads, t, heads * d])
}

pub fn attend(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &HeadConfig,
    level: usize,
    diff: NodeId,
    f1: NodeId,
    f2: NodeId,
) -> Result<Attended> {
    let (c, h, w) = g.value(diff).dims3()?;
    if c % cfg.heads != 0 {
        return Err(Error::shape(format!("{c} channels are not divisible by {} heads", cfg.heads)));
    }
    let s = cfg.window;
    let heads = cfg.heads;
    let p = |n: &str| format!("edqa.{level}.{n}");

    let dw = g.window_partition(diff, s)?;
    let q = linear(g, store, &p("q"), dw)?;
    let k = linear(g, store, &p("k"), dw)?;
    let q = split_heads(g, q, heads)?;
    let k = split_heads(g, k, heads)?;
    let scores = g.bmm(q, k, true)?;
    let scores = g.affine(scores, 1.0 / ((c / heads) as f64).sqrt(), 0.0)?;
    let table = g.param(store, &p("rel_bias"))?;
    let scores = g.add_relative_bias(scores, table, s)?;
    let weights = g.softmax(scores)?;

    let mut outs = [diff; 2];
    for (t, (out, f)) in outs.iter_mut().zip([f1, f2]).enumerate() {
        let t = t + 1;
        let cat = g.concat(diff, f)?;
        let guide = conv1(g, store, &p("guide"), cat)?;
        let gw = g.window_partition(guide, s)?;
        let v = linear(g, store, &p(&format!("v{t}")), gw)?;
        let v = split_heads(g, v, heads)?;
        let mixed = g.bmm(weights, v, false)?;
        let mixed = merge_heads(g, mixed, heads)?;
        let proj = linear(g, store, &p(&format!("proj{t}")), mixed)?;
        *out = g.window_reverse(proj, s, h, w)?;
    }
    Ok(Attended {
        d1: outs[0],
        d2: outs[1],
        weights,
    })
}

/// `ReLU(conv3(ReLU(conv3(D1 ‖ D2))))`.
pub fn fuse(g: &mut Graph, store: &ParamStore, level: usize, d1: NodeId, d2: NodeId) -> Result<NodeId> {
    let cat = g.concat(d1, d2)?;
    let a = conv3(g, store, &format!("edqa.{level}.fuse1"), cat)?;
    let a = g.relu(a)?;
    let b = conv3(g, store, &format!("edqa.{level}.fuse2"), a)?;
    g.relu(b)
}
