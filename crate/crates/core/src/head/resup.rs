//! Residual upsampling decoder.
//!
//! Each level is reduced to `up_dim` channels, then walked from the coarsest
//! level to the finest: `acc ← up2(Res2(Res1(X̃_k) + acc))`, with `acc`
//! starting empty. The output head is `conv1(ReLU(conv3(acc)))` resized to
//! the image. Every level also feeds its own 1×1 auxiliary classifier.

use super::config::{HeadConfig, LEVELS};
use super::layers::{add_conv, conv1, conv3};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{Init, ParamStore};

pub(crate) fn init(init: &mut Init, store: &mut ParamStore, cfg: &HeadConfig) {
    let d = cfg.up_dim;
    for k in 0..LEVELS {
        add_conv(init, store, &format!("resup.{k}.reduce"), cfg.channels[k], d, 1);
        for unit in ["res1", "res2"] {
            add_conv(init, store, &format!("resup.{k}.{unit}.a"), d, d, 1);
            add_conv(init, store, &format!("resup.{k}.{unit}.b"), d, d, 1);
        }
        add_conv(init, store, &format!("resup.{k}.aux"), d, 2, 1);
    }
    add_conv(init, store, "resup.head.conv", d, d, 3);
    add_conv(init, store, "resup.head.out", d, 2, 1);
}

/// `conv1(ReLU(conv1(ReLU(z)))) + z`.
pub fn res_conv(g: &mut Graph, store: &ParamStore, name: &str, z: NodeId) -> Result<NodeId> {
    let a = g.relu(z)?;
    let a = conv1(g, store, &format!("{name}.a"), a)?;
    let a = g.relu(a)?;
    let b = conv1(g, store, &format!("{name}.b"), a)?;
    g.add(b, z)
}

pub struct Decoded {
    pub logits: NodeId,
    pub aux: Vec<NodeId>,
    /// Accumulator after each level, coarsest first.
    pub trajectory: Vec<NodeId>,
}

pub fn decode(
    g: &mut Graph,
    store: &ParamStore,
    levels: &[NodeId],
    out_h: usize,
    out_w: usize,
) -> Result<Decoded> {
    if levels.len() != LEVELS {
        return Err(Error::shape(format!("decoder needs {LEVELS} levels, got {}", levels.len())));
    }
    let sizes: Vec<(usize, usize)> = levels
        .iter()
        .map(|&l| g.value(l).dims3().map(|(_, h, w)| (h, w)))
        .collect::<Result<_>>()?;
    for k in 0..LEVELS - 1 {
        if sizes[k] != (2 * sizes[k + 1].0, 2 * sizes[k + 1].1) {
            return Err(Error::shape(format!(
                "level sizes {sizes:?} do not halve from one level to the next"
            )));
        }
    }

    let mut reduced = Vec::with_capacity(LEVELS);
    let mut aux = Vec::with_capacity(LEVELS);
    for (k, &x) in levels.iter().enumerate() {
        let r = conv1(g, store, &format!("resup.{k}.reduce"), x)?;
        let a = conv1(g, store, &format!("resup.{k}.aux"), r)?;
        aux.push(g.bilinear(a, out_h, out_w)?);
        reduced.push(r);
    }

    let mut acc: Option<NodeId> = None;
    let mut trajectory = Vec::with_capacity(LEVELS);
    for k in (0..LEVELS).rev() {
        let mut z = res_conv(g, store, &format!("resup.{k}.res1"), reduced[k])?;
        if let Some(a) = acc {
            z = g.add(z, a)?;
        }
        let z = res_conv(g, store, &format!("resup.{k}.res2"), z)?;
        let (h, w) = sizes[k];
        let up = g.bilinear(z, 2 * h, 2 * w)?;
        trajectory.push(up);
        acc = Some(up);
    }
    let acc = acc.expect("at least one level");
    let hcv = conv3(g, store, "resup.head.conv", acc)?;
    let hcv = g.relu(hcv)?;
    let out = conv1(g, store, "resup.head.out", hcv)?;
    let logits = g.bilinear(out, out_h, out_w)?;
    Ok(Decoded {
        logits,
        aux,
        trajectory,
    })
}
