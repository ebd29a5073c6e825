//! Parameter registration and graph helpers shared by the head submodules.
//! A layer named `p` owns `p.w` and `p.b`.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

pub(crate) fn add_conv(init: &mut Init, store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize) {
    store.insert(format!("{name}.w"), init.he(&[cout, cin, k, k], cin * k * k));
    store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
}

pub(crate) fn add_deconv(init: &mut Init, store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize) {
    let taps = cin * (k / stride).pow(2);
    store.insert(format!("{name}.w"), init.he(&[cin, cout, k, k], taps));
    store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
}

pub(crate) fn add_linear(init: &mut Init, store: &mut ParamStore, name: &str, cin: usize, cout: usize, gain: f64) {
    store.insert(format!("{name}.w"), init.normal(&[cout, cin], gain / (cin as f64).sqrt()));
    store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
}

pub(crate) fn conv(g: &mut Graph, store: &ParamStore, name: &str, x: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    g.conv2d(x, w, Some(b), stride, pad)
}

/// 3×3, stride 1, padding 1.
pub(crate) fn conv3(g: &mut Graph, store: &ParamStore, name: &str, x: NodeId) -> Result<NodeId> {
    conv(g, store, name, x, 1, 1)
}

pub(crate) fn conv1(g: &mut Graph, store: &ParamStore, name: &str, x: NodeId) -> Result<NodeId> {
    conv(g, store, name, x, 1, 0)
}

pub(crate) fn deconv(g: &mut Graph, store: &ParamStore, name: &str, x: NodeId, stride: usize) -> Result<NodeId> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    g.deconv2d(x, w, Some(b), stride)
}

pub(crate) fn linear(g: &mut Graph, store: &ParamStore, name: &str, x: NodeId) -> Result<NodeId> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    g.linear(x, w, Some(b))
}

/// `[C,H,W]` → `[H·W, C]`.
pub(crate) fn to_tokens(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let (c, h, w) = g.value(x).dims3()?;
    let p = g.permute(x, &[1, 2, 0])?;
    g.reshape(p, &[h * w, c])
}

/// `[H·W, C]` → `[C,H,W]`.
pub(crate) fn from_tokens(g: &mut Graph, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
    let c = g.value(x).shape()[1];
    let r = g.reshape(x, &[h, w, c])?;
    g.permute(r, &[2, 0, 1])
}
