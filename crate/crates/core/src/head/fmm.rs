//! Feature modulation: per-level 1×1 projection, then a fixed rescaling
//! (×4 and ×2 transposed convolutions, identity, stride-2 3×3 convolution)
//! that turns single-grid tap features into a four-level pyramid.

use super::config::{HeadConfig, LEVELS};
use super::layers::{add_conv, add_deconv, conv, conv1, deconv};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{Init, ParamStore};

pub(crate) fn init(init: &mut Init, store: &mut ParamStore, cfg: &HeadConfig) {
    for k in 0..LEVELS {
        let c = cfg.channels[k];
        add_conv(init, store, &format!("fmm.{k}.proj"), cfg.feature_dim, c, 1);
        match k {
            0 => add_deconv(init, store, &format!("fmm.{k}.resize"), c, c, 4, 4),
            1 => add_deconv(init, store, &format!("fmm.{k}.resize"), c, c, 2, 2),
            2 => {}
            _ => add_conv(init, store, &format!("fmm.{k}.resize"), c, c, 3),
        }
    }
}

/// Modulates one tap-layer feature map into pyramid level `level`.
pub fn modulate(g: &mut Graph, store: &ParamStore, level: usize, raw: NodeId) -> Result<NodeId> {
    let x = conv1(g, store, &format!("fmm.{level}.proj"), raw)?;
    let name = format!("fmm.{level}.resize");
    match level {
        0 => deconv(g, store, &name, x, 4),
        1 => deconv(g, store, &name, x, 2),
        2 => Ok(x),
        3 => conv(g, store, &name, x, 2, 1),
        _ => Err(Error::invalid(format!("no pyramid level {level}"))),
    }
}

/// Modulated pyramids for both timestamps; the same weights serve both.
pub fn modulate_pair(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &HeadConfig,
    raw1: &[NodeId],
    raw2: &[NodeId],
) -> Result<[Vec<NodeId>; 2]> {
    if raw1.len() != LEVELS || raw2.len() != LEVELS {
        return Err(Error::shape(format!(
            "expected {LEVELS} tap layers per timestamp, got {} and {}",
            raw1.len(),
            raw2.len()
        )));
    }
    let (_, gh, gw) = g.value(raw1[0]).dims3()?;
    let sizes = cfg.level_sizes(gh, gw)?;
    let mut out = [Vec::with_capacity(LEVELS), Vec::with_capacity(LEVELS)];
    for (t, raws) in [raw1, raw2].into_iter().enumerate() {
        for (k, &r) in raws.iter().enumerate() {
            let (_, h, w) = g.value(r).dims3()?;
            if (h, w) != (gh, gw) {
                return Err(Error::shape(format!("tap layer {k} grid {h}x{w} differs from {gh}x{gw}")));
            }
            let m = modulate(g, store, k, r)?;
            let (_, mh, mw) = g.value(m).dims3()?;
            debug_assert_eq!((mh, mw), sizes[k]);
            out[t].push(m);
        }
    }
    Ok(out)
}
