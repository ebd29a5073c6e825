//! Loss terms, plain SGD and the deterministic training loop.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, RawFeatures};
use crate::data::resize_to_patch_multiple;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::head::{ChangeHead, HeadOutputs, LEVELS};
use crate::maps::ChangeMap;
use crate::metrics::{binary_metrics, confusion, Confusion};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta_ups: f64,
    pub upsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            beta_ups: 0.1,
            upsilon: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta_ups, self.upsilon].iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative, got {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 4,
            epochs: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted so that a run can be replayed
    /// without updates.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate {} is invalid", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Two co-registered `[3,H,W]` images and their binary change label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPair {
    pub stem: String,
    pub image1: Tensor,
    pub image2: Tensor,
    pub label: ChangeMap,
}

impl LabeledPair {
    pub fn new(stem: impl Into<String>, image1: Tensor, image2: Tensor, label: ChangeMap) -> Result<Self> {
        let (c, h, w) = image1.dims3()?;
        if c != 3 {
            return Err(Error::shape(format!("expected 3-channel images, got {c}")));
        }
        image1.expect_same_shape(&image2, "bi-temporal images")?;
        label.expect_grid(h, w)?;
        Ok(Self {
            stem: stem.into(),
            image1,
            image2,
            label,
        })
    }

    pub fn height(&self) -> usize {
        self.label.height()
    }

    pub fn width(&self) -> usize {
        self.label.width()
    }
}

/// Mean 2-class cross-entropy of `[2,H,W]` logits.
pub fn loss_cd(g: &mut Graph, logits: NodeId, label: &ChangeMap) -> Result<NodeId> {
    let (c, h, w) = g.value(logits).dims3()?;
    if c != 2 {
        return Err(Error::shape(format!("change logits need 2 channels, got {c}")));
    }
    label.expect_grid(h, w)?;
    g.cross_entropy(logits, label.data())
}

/// Sum of [`loss_cd`] over the auxiliary logits of every level.
pub fn loss_ups(g: &mut Graph, aux: &[NodeId], label: &ChangeMap) -> Result<NodeId> {
    if aux.len() != LEVELS {
        return Err(Error::invalid(format!(
            "upsampling loss needs {LEVELS} auxiliary maps, got {}",
            aux.len()
        )));
    }
    let mut total = loss_cd(g, aux[0], label)?;
    for &a in &aux[1..] {
        let l = loss_cd(g, a, label)?;
        total = g.add(total, l)?;
    }
    Ok(total)
}

/// Mean of `1 − cos` over unchanged pixels; 0 when every pixel changed.
pub fn loss_sim(g: &mut Graph, emb1: NodeId, emb2: NodeId, label: &ChangeMap) -> Result<NodeId> {
    let (_, h, w) = g.value(emb1).dims3()?;
    label.expect_grid(h, w)?;
    let cos = g.cosine(emb1, emb2, COSINE_EPS)?;
    let dissim = g.affine(cos, -1.0, 1.0)?;
    let unchanged = Tensor::from_fn(&[h, w], |p| 1.0 - label.data()[p] as f64);
    g.weighted_mean(dissim, unchanged)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub cd: f64,
    pub ups: f64,
    pub sim: f64,
}

impl LossParts {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.alpha * self.cd + w.beta_ups * self.ups + w.upsilon * self.sim
    }
}

pub struct LossNodes {
    pub cd: NodeId,
    pub ups: NodeId,
    pub sim: NodeId,
    pub total: NodeId,
}

impl LossNodes {
    pub fn parts(&self, g: &Graph) -> LossParts {
        LossParts {
            cd: g.value(self.cd).data()[0],
            ups: g.value(self.ups).data()[0],
            sim: g.value(self.sim).data()[0],
        }
    }
}

/// `α·L_cd + β·L_ups + υ·L_sim` on the graph.
pub fn loss_total(g: &mut Graph, cd: NodeId, ups: NodeId, sim: NodeId, w: &LossWeights) -> Result<NodeId> {
    let a = g.affine(cd, w.alpha, 0.0)?;
    let b = g.affine(ups, w.beta_ups, 0.0)?;
    let c = g.affine(sim, w.upsilon, 0.0)?;
    let ab = g.add(a, b)?;
    g.add(ab, c)
}

pub fn build_losses(g: &mut Graph, out: &HeadOutputs, label: &ChangeMap, w: &LossWeights) -> Result<LossNodes> {
    let cd = loss_cd(g, out.logits, label)?;
    let ups = loss_ups(g, &out.aux, label)?;
    let sim = loss_sim(g, out.embeddings[0], out.embeddings[1], label)?;
    let total = loss_total(g, cd, ups, sim, w)?;
    Ok(LossNodes { cd, ups, sim, total })
}

/// `p ← p − lr·g` for every learnable parameter, in name order.
pub fn sgd_step(store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
    if let Some(name) = grads.keys().find(|n| !store.is_learnable(n)) {
        return Err(Error::UnknownParameter(name.clone()));
    }
    let names: Vec<String> = store.learnable().map(|(n, _)| n.to_string()).collect();
    for name in &names {
        let g = grads.get(name).ok_or_else(|| Error::MissingGradient(name.clone()))?;
        let p = store.get_mut(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape(format!(
                "gradient for `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        for (v, d) in p.data_mut().iter_mut().zip(g.data()) {
            *v -= lr * d;
        }
    }
    Ok(())
}

/// Sample order for one epoch; a pure function of `(n, seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// One line of the training log, averaged over the epoch's samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub l_cd: f64,
    pub l_ups: f64,
    pub l_sim: f64,
    pub l_total: f64,
    /// Change IoU of the predictions made during the epoch.
    pub iou_c: f64,
}

pub fn write_log(path: impl AsRef<Path>, records: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub head: ChangeHead,
    pub epochs: Vec<EpochRecord>,
    /// Batch-mean total loss of every step, before its update.
    pub step_losses: Vec<f64>,
}

/// Forward, losses and parameter gradients for one pair.
pub fn sample_gradients(
    head: &ChangeHead,
    raw: &RawFeatures,
    label: &ChangeMap,
    w: &LossWeights,
) -> Result<(LossParts, ChangeMap, BTreeMap<String, Tensor>)> {
    let mut g = Graph::new();
    let out = head.forward(&mut g, raw, label.height(), label.width())?;
    let losses = build_losses(&mut g, &out, label, w)?;
    let pred = ChangeMap::from_logits(g.value(out.logits))?;
    let grads = g.backward(losses.total)?.for_params(&head.params);
    Ok((losses.parts(&g), pred, grads))
}

/// Backbone features of a pair, resizing both images to a multiple of the
/// patch size first.
pub fn pair_features(backbone: &Backbone, stem: &str, image1: &Tensor, image2: &Tensor) -> Result<RawFeatures> {
    let p = backbone.config().patch_size;
    let i1 = resize_to_patch_multiple(image1, p)?;
    let i2 = resize_to_patch_multiple(image2, p)?;
    backbone.features(stem, &i1, &i2)
}

/// Extracts the frozen features of every pair once.
pub fn cache_features(dataset: &[LabeledPair], backbone: &Backbone) -> Result<Vec<RawFeatures>> {
    dataset
        .iter()
        .map(|p| pair_features(backbone, &p.stem, &p.image1, &p.image2))
        .collect()
}

/// Runs `cfg.epochs` epochs of mini-batch SGD, stopping early after
/// `max_steps` optimizer steps when given. `on_epoch` sees each record as
/// soon as its epoch ends.
pub fn train(
    dataset: &[LabeledPair],
    head: ChangeHead,
    features: &[RawFeatures],
    cfg: &TrainConfig,
    weights: &LossWeights,
    max_steps: Option<usize>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    weights.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if features.len() != dataset.len() {
        return Err(Error::invalid("one feature set per training pair is required"));
    }
    let (h, w) = (dataset[0].height(), dataset[0].width());
    if let Some(p) = dataset.iter().find(|p| (p.height(), p.width()) != (h, w)) {
        return Err(Error::shape(format!(
            "pair `{}` is {}x{}, the first pair {h}x{w}",
            p.stem,
            p.height(),
            p.width()
        )));
    }

    let mut head = head;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let order = epoch_order(dataset.len(), cfg.seed, epoch);
        let mut sums = LossParts {
            cd: 0.0,
            ups: 0.0,
            sim: 0.0,
        };
        let mut seen = 0;
        let mut conf = Confusion::default();
        for batch in order.chunks(cfg.batch_size) {
            if max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let mut acc: Option<BTreeMap<String, Tensor>> = None;
            let mut batch_loss = 0.0;
            for &i in batch {
                let (parts, pred, grads) =
                    sample_gradients(&head, &features[i], &dataset[i].label, weights).map_err(|e| match e {
                        Error::NonFinite(_) => Error::NonFiniteLoss { step },
                        e => e,
                    })?;
                let total = parts.total(weights);
                if !total.is_finite() {
                    return Err(Error::NonFiniteLoss { step });
                }
                batch_loss += total;
                sums.cd += parts.cd;
                sums.ups += parts.ups;
                sums.sim += parts.sim;
                seen += 1;
                conf += confusion(&pred, &dataset[i].label)?;
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (name, g) in grads {
                            a.get_mut(&name).expect("same parameter set").add_assign(&g)?;
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let grads: BTreeMap<String, Tensor> = acc
                .expect("batches are non-empty")
                .into_iter()
                .map(|(n, g)| (n, g.scale(scale)))
                .collect();
            sgd_step(&mut head.params, &grads, cfg.learning_rate)?;
            step_losses.push(batch_loss * scale);
            step += 1;
        }
        if seen == 0 {
            break 'epochs;
        }
        let n = seen as f64;
        let mean = LossParts {
            cd: sums.cd / n,
            ups: sums.ups / n,
            sim: sums.sim / n,
        };
        let record = EpochRecord {
            epoch,
            step,
            l_cd: mean.cd,
            l_ups: mean.ups,
            l_sim: mean.sim,
            l_total: mean.total(weights),
            iou_c: binary_metrics(&conf)?.iou,
        };
        on_epoch(&record);
        epochs.push(record);
    }
    Ok(TrainOutcome {
        head,
        epochs,
        step_losses,
    })
}
