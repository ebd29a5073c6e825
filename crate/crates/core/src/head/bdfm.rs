//! Bi-temporal difference fusion.
//!
//! `Att = σ(conv3(|F1 − F2|))`, `X_t = ReLU(conv3(F_t + Att⊙F_t))` with the
//! enhancement conv shared across timestamps, and
//! `D = ReLU(conv3(ReLU(conv3(X1 ‖ X2)) ⊙ Att))`.

use super::config::{HeadConfig, LEVELS};
use super::layers::{add_conv, conv3};
use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::params::{Init, ParamStore};

pub(crate) fn init(init: &mut Init, store: &mut ParamStore, cfg: &HeadConfig) {
    for k in 0..LEVELS {
        let c = cfg.channels[k];
        add_conv(init, store, &format!("bdfm.{k}.att"), c, c, 3);
        add_conv(init, store, &format!("bdfm.{k}.enhance"), c, c, 3);
        add_conv(init, store, &format!("bdfm.{k}.merge"), 2 * c, c, 3);
        add_conv(init, store, &format!("bdfm.{k}.out"), c, c, 3);
    }
}

/// Difference attention in (0, 1); symmetric in its two feature arguments.
pub fn attention(g: &mut Graph, store: &ParamStore, level: usize, f1: NodeId, f2: NodeId) -> Result<NodeId> {
    let diff = g.sub(f1, f2)?;
    let mag = g.abs(diff)?;
    let z = conv3(g, store, &format!("bdfm.{level}.att"), mag)?;
    g.sigmoid(z)
}

pub struct Fused {
    pub x1: NodeId,
    pub x2: NodeId,
    pub diff: NodeId,
}

pub fn fuse(g: &mut Graph, store: &ParamStore, level: usize, f1: NodeId, f2: NodeId, att: NodeId) -> Result<Fused> {
    let enhance = format!("bdfm.{level}.enhance");
    let mut xs = [f1; 2];
    for (x, f) in xs.iter_mut().zip([f1, f2]) {
        let gated = g.mul(att, f)?;
        let boosted = g.add(f, gated)?;
        let z = conv3(g, store, &enhance, boosted)?;
        *x = g.relu(z)?;
    }
    let cat = g.concat(xs[0], xs[1])?;
    let merged = conv3(g, store, &format!("bdfm.{level}.merge"), cat)?;
    let merged = g.relu(merged)?;
    let weighted = g.mul(merged, att)?;
    let out = conv3(g, store, &format!("bdfm.{level}.out"), weighted)?;
    let diff = g.relu(out)?;
    Ok(Fused {
        x1: xs[0],
        x2: xs[1],
        diff,
    })
}
