//! Append-only computation graph with reverse-mode differentiation.
//!
//! Nodes are stored in construction order, which is also a topological
//! order; [`Graph::backward`] walks them strictly in reverse, so gradient
//! accumulation order is fixed and results are reproducible bit for bit.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ops;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Param,
    Input,
    Conv2d { stride: usize, pad: usize },
    Deconv2d { stride: usize },
    Linear,
    Bmm { transpose_b: bool },
    Sigmoid,
    Relu,
    Gelu,
    Abs,
    Add,
    Sub,
    Mul,
    Affine { scale: f64 },
    Softmax,
    Bilinear { in_h: usize, in_w: usize },
    Concat { split: usize },
    Cosine { eps: f64 },
    Reshape,
    Permute { axes: Vec<usize> },
    RelBias { size: usize },
    MixExperts,
    CrossEntropy { labels: Vec<u8> },
    WeightedMean { weights: Tensor },
    Sum,
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
    frozen: Option<FrozenKinks>,
}

#[derive(Debug)]
struct FrozenKinks {
    signs: Vec<i8>,
    cursor: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose ReLU and abs ops take the side of zero from `signs`
    /// (as produced by [`Graph::kink_pattern`]) instead of from their
    /// inputs, so it evaluates the smooth piece the pattern was taken on.
    /// Intended for forward evaluation only.
    pub fn with_frozen_kinks(signs: Vec<i8>) -> Self {
        Self {
            frozen: Some(FrozenKinks { signs, cursor: 0 }),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Sign of every input to a non-differentiable-at-zero op (ReLU, abs),
    /// in construction order. Two evaluations with equal patterns lie on
    /// one smooth piece of the function.
    pub fn kink_pattern(&self) -> Vec<i8> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if matches!(node.op, Op::Relu | Op::Abs) {
                let x = &self.nodes[node.inputs[0].0].value;
                out.extend(x.data().iter().map(|&v| v.partial_cmp(&0.0).map_or(0, |o| o as i8)));
            }
        }
        out
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{op:?}")));
        }
        let requires_grad = match op {
            Op::Param => true,
            Op::Input => false,
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Leaf for a stored parameter. Repeated requests for one name share a
    /// node, so gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let value = store.get(name)?.clone();
        let op = if store.is_learnable(name) { Op::Param } else { Op::Input };
        let id = self.push(op, vec![], value)?;
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Input, vec![], value)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> Result<NodeId> {
        let v = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Op::Conv2d { stride, pad }, inputs, v)
    }

    pub fn deconv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize) -> Result<NodeId> {
        let v = ops::deconv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Op::Deconv2d { stride }, inputs, v)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let v = ops::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Op::Linear, inputs, v)
    }

    pub fn bmm(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let v = ops::bmm(self.value(a), self.value(b), transpose_b)?;
        self.push(Op::Bmm { transpose_b }, vec![a, b], v)
    }

    fn unary(&mut self, op: Op, x: NodeId, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        let v = self.value(x).map(f);
        self.push(op, vec![x], v)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Op::Sigmoid, x, ops::sigmoid)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        match self.frozen_signs(x)? {
            Some(signs) => {
                let v = self.value(x).zip_map(&signs, |v, s| if s > 0.0 { v } else { 0.0 })?;
                self.push(Op::Relu, vec![x], v)
            }
            None => self.unary(Op::Relu, x, ops::relu),
        }
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Op::Gelu, x, ops::gelu)
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        match self.frozen_signs(x)? {
            Some(signs) => {
                let v = self.value(x).zip_map(&signs, |v, s| s * v)?;
                self.push(Op::Abs, vec![x], v)
            }
            None => self.unary(Op::Abs, x, f64::abs),
        }
    }

    fn frozen_signs(&mut self, x: NodeId) -> Result<Option<Tensor>> {
        let shape = self.value(x).shape().to_vec();
        let Some(f) = self.frozen.as_mut() else {
            return Ok(None);
        };
        let n = shape.iter().product::<usize>();
        let end = f.cursor + n;
        if end > f.signs.len() {
            return Err(Error::invalid("frozen kink pattern is shorter than the graph"));
        }
        let signs = f.signs[f.cursor..end].iter().map(|&s| s as f64).collect();
        f.cursor = end;
        Tensor::new(shape, signs).map(Some)
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        self.unary(Op::Affine { scale }, x, move |v| scale * v + shift)
    }

    fn binary(&mut self, op: Op, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), f)?;
        self.push(op, vec![a, b], v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::softmax_last(self.value(x))?;
        self.push(Op::Softmax, vec![x], v)
    }

    pub fn bilinear(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let (_, in_h, in_w) = self.value(x).dims3()?;
        let v = ops::bilinear_resize(self.value(x), h, w)?;
        self.push(Op::Bilinear { in_h, in_w }, vec![x], v)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::concat_channels(self.value(a), self.value(b))?;
        let split = self.value(a).len();
        self.push(Op::Concat { split }, vec![a, b], v)
    }

    pub fn cosine(&mut self, a: NodeId, b: NodeId, eps: f64) -> Result<NodeId> {
        let v = ops::cosine_map(self.value(a), self.value(b), eps)?;
        self.push(Op::Cosine { eps }, vec![a, b], v)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).reshape(shape)?;
        self.push(Op::Reshape, vec![x], v)
    }

    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let v = self.value(x).permute(axes)?;
        self.push(Op::Permute { axes: axes.to_vec() }, vec![x], v)
    }

    pub fn window_partition(&mut self, x: NodeId, size: usize) -> Result<NodeId> {
        let (c, h, w) = self.value(x).dims3()?;
        ops::check_window(h, w, size)?;
        let r = self.reshape(x, &[c, h / size, size, w / size, size])?;
        let p = self.permute(r, &[1, 3, 2, 4, 0])?;
        self.reshape(p, &[(h / size) * (w / size), size * size, c])
    }

    pub fn window_reverse(&mut self, x: NodeId, size: usize, h: usize, w: usize) -> Result<NodeId> {
        ops::check_window(h, w, size)?;
        let c = *self.value(x).shape().last().unwrap_or(&0);
        let r = self.reshape(x, &[h / size, w / size, size, size, c])?;
        let p = self.permute(r, &[4, 0, 2, 1, 3])?;
        self.reshape(p, &[c, h, w])
    }

    pub fn add_relative_bias(&mut self, scores: NodeId, table: NodeId, size: usize) -> Result<NodeId> {
        let v = ops::add_relative_bias(self.value(scores), self.value(table), size)?;
        self.push(Op::RelBias { size }, vec![scores, table], v)
    }

    pub fn mix_experts(&mut self, gate: NodeId, experts: &[NodeId]) -> Result<NodeId> {
        let refs: Vec<&Tensor> = experts.iter().map(|&e| self.value(e)).collect();
        let v = ops::mix_experts(self.value(gate), &refs)?;
        let mut inputs = vec![gate];
        inputs.extend_from_slice(experts);
        self.push(Op::MixExperts, inputs, v)
    }

    /// Mean softmax cross-entropy of `[K,H,W]` logits against labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[u8]) -> Result<NodeId> {
        let v = ops::softmax_cross_entropy(self.value(logits), labels)?;
        self.push(
            Op::CrossEntropy {
                labels: labels.to_vec(),
            },
            vec![logits],
            Tensor::scalar(v),
        )
    }

    pub fn weighted_mean(&mut self, x: NodeId, weights: Tensor) -> Result<NodeId> {
        let v = ops::weighted_mean(self.value(x), &weights)?;
        self.push(Op::WeightedMean { weights }, vec![x], Tensor::scalar(v))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).sum();
        self.push(Op::Sum, vec![x], Tensor::scalar(v))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0])?);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, gi) in self.input_grads(node, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gi)?,
                    slot => *slot = Some(gi),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn input_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let ins = &node.inputs;
        let val = |i: usize| self.value(ins[i]);
        let out = match &node.op {
            Op::Param | Op::Input => vec![],
            Op::Conv2d { stride, pad } => {
                let cg = ops::conv2d_backward(val(0), val(1), g, *stride, *pad, self.needs(ins[0]))?;
                let mut v = vec![(ins[1], cg.weight)];
                if let Some(gx) = cg.input {
                    v.push((ins[0], gx));
                }
                if ins.len() == 3 {
                    v.push((ins[2], cg.bias));
                }
                v
            }
            Op::Deconv2d { stride } => {
                let cg = ops::deconv2d_backward(val(0), val(1), g, *stride, self.needs(ins[0]))?;
                let mut v = vec![(ins[1], cg.weight)];
                if let Some(gx) = cg.input {
                    v.push((ins[0], gx));
                }
                if ins.len() == 3 {
                    v.push((ins[2], cg.bias));
                }
                v
            }
            Op::Linear => {
                let lg = ops::linear_backward(val(0), val(1), g, self.needs(ins[0]))?;
                let mut v = vec![(ins[1], lg.weight)];
                if let Some(gx) = lg.input {
                    v.push((ins[0], gx));
                }
                if ins.len() == 3 {
                    v.push((ins[2], lg.bias));
                }
                v
            }
            Op::Bmm { transpose_b } => {
                let (ga, gb) = ops::bmm_backward(val(0), val(1), g, *transpose_b)?;
                vec![(ins[0], ga), (ins[1], gb)]
            }
            Op::Sigmoid => vec![(ins[0], node.value.zip_map(g, |y, g| g * y * (1.0 - y))?)],
            Op::Relu => vec![(ins[0], val(0).zip_map(g, |x, g| if x > 0.0 { g } else { 0.0 })?)],
            Op::Gelu => vec![(ins[0], val(0).zip_map(g, |x, g| g * ops::gelu_grad(x))?)],
            Op::Abs => vec![(ins[0], val(0).zip_map(g, |x, g| if x > 0.0 { g } else if x < 0.0 { -g } else { 0.0 })?)],
            Op::Affine { scale } => vec![(ins[0], g.scale(*scale))],
            Op::Add => vec![(ins[0], g.clone()), (ins[1], g.clone())],
            Op::Sub => vec![(ins[0], g.clone()), (ins[1], g.scale(-1.0))],
            Op::Mul => vec![
                (ins[0], g.zip_map(val(1), |g, b| g * b)?),
                (ins[1], g.zip_map(val(0), |g, a| g * a)?),
            ],
            Op::Softmax => vec![(ins[0], ops::softmax_last_backward(&node.value, g)?)],
            Op::Bilinear { in_h, in_w } => vec![(ins[0], ops::bilinear_resize_backward(g, *in_h, *in_w)?)],
            Op::Concat { split } => {
                let a = Tensor::new(val(0).shape().to_vec(), g.data()[..*split].to_vec())?;
                let b = Tensor::new(val(1).shape().to_vec(), g.data()[*split..].to_vec())?;
                vec![(ins[0], a), (ins[1], b)]
            }
            Op::Cosine { eps } => {
                let (ga, gb) = ops::cosine_map_backward(val(0), val(1), *eps, g)?;
                vec![(ins[0], ga), (ins[1], gb)]
            }
            Op::Reshape => vec![(ins[0], g.reshape(val(0).shape())?)],
            Op::Permute { axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                vec![(ins[0], g.permute(&inverse)?)]
            }
            Op::RelBias { size } => vec![
                (ins[0], g.clone()),
                (ins[1], ops::add_relative_bias_backward(g, val(1), *size)?),
            ],
            Op::MixExperts => {
                let experts: Vec<&Tensor> = ins[1..].iter().map(|&e| self.value(e)).collect();
                let (gg, ge) = ops::mix_experts_backward(val(0), &experts, g)?;
                let mut v = vec![(ins[0], gg)];
                v.extend(ins[1..].iter().copied().zip(ge));
                v
            }
            Op::CrossEntropy { labels } => {
                vec![(ins[0], ops::softmax_cross_entropy_backward(val(0), labels, g.item()?)?)]
            }
            Op::WeightedMean { weights } => {
                let total = weights.sum();
                let k = if total == 0.0 { 0.0 } else { g.item()? / total };
                vec![(ins[0], weights.scale(k))]
            }
            Op::Sum => vec![(ins[0], Tensor::full(val(0).shape(), g.item()?))],
        };
        Ok(out)
    }
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, NodeId>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for every learnable parameter in `store`. Parameters the
    /// loss does not depend on get explicit zeros.
    pub fn for_params(&self, store: &ParamStore) -> BTreeMap<String, Tensor> {
        store
            .learnable()
            .map(|(name, value)| {
                let g = self
                    .params
                    .get(name)
                    .and_then(|&id| self.get(id).cloned())
                    .unwrap_or_else(|| Tensor::zeros(value.shape()));
                (name.to_string(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5));
        let mut g = Graph::new();
        let x = g.param(&store, "x").unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap().for_params(&store);
        assert_eq!(grads["x"], Tensor::ones(&[2, 3]));
    }

    #[test]
    fn sigmoid_gradient_closed_form() {
        let mut store = ParamStore::new();
        let x = Tensor::from_fn(&[5], |i| i as f64 - 2.0);
        store.insert("x", x.clone());
        let mut g = Graph::new();
        let xn = g.param(&store, "x").unwrap();
        let s = g.sigmoid(xn).unwrap();
        let l = g.sum(s).unwrap();
        let grads = g.backward(l).unwrap().for_params(&store);
        for (gv, xv) in grads["x"].data().iter().zip(x.data()) {
            let s = ops::sigmoid(*xv);
            assert!((gv - s * (1.0 - s)).abs() < 1e-15);
        }
    }

    #[test]
    fn unreachable_params_get_zeros() {
        let mut store = ParamStore::new();
        store.insert("used", Tensor::ones(&[2]));
        store.insert("unused", Tensor::ones(&[3]));
        store.insert_frozen("frozen", Tensor::ones(&[2]));
        let mut g = Graph::new();
        let a = g.param(&store, "used").unwrap();
        let f = g.param(&store, "frozen").unwrap();
        let m = g.mul(a, f).unwrap();
        let l = g.sum(m).unwrap();
        let grads = g.backward(l).unwrap().for_params(&store);
        assert_eq!(grads.len(), 2);
        assert_eq!(grads["unused"], Tensor::zeros(&[3]));
        assert_eq!(grads["used"], Tensor::ones(&[2]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::ones(&[2])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn shared_param_accumulates() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::full(&[1], 3.0));
        let mut g = Graph::new();
        let a = g.param(&store, "w").unwrap();
        let b = g.param(&store, "w").unwrap();
        assert_eq!(a, b);
        let m = g.mul(a, b).unwrap();
        let l = g.sum(m).unwrap();
        let grads = g.backward(l).unwrap().for_params(&store);
        assert_eq!(grads["w"].data(), &[6.0]);
    }
}
