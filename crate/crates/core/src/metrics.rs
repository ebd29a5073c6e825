//! Confusion-matrix metrics for binary and semantic change detection.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{ChangeMap, SemanticMap};

/// Pixel counts of one binary comparison.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Counts over two equally long 0/1 slices.
    pub fn from_slices(pred: &[u8], gt: &[u8]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::shape(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let mut c = Confusion::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p, g) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 1) => c.fn_ += 1,
                (0, 0) => c.tn += 1,
                _ => return Err(Error::invalid(format!("non-binary value in ({p}, {g})"))),
            }
        }
        Ok(c)
    }

    /// The same counts with the positive and negative class exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }
}

impl Add for Confusion {
    type Output = Confusion;

    fn add(mut self, rhs: Confusion) -> Confusion {
        self += rhs;
        self
    }
}

impl AddAssign for Confusion {
    fn add_assign(&mut self, rhs: Confusion) {
        self.tp += rhs.tp;
        self.fp += rhs.fp;
        self.fn_ += rhs.fn_;
        self.tn += rhs.tn;
    }
}

pub fn confusion(pred: &ChangeMap, gt: &ChangeMap) -> Result<Confusion> {
    gt.expect_grid(pred.height(), pred.width())?;
    Confusion::from_slices(pred.data(), gt.data())
}

/// Which metrics hit a zero denominator and were set to 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Degenerate {
    pub precision: bool,
    pub recall: bool,
    pub f1: bool,
    pub iou: bool,
    pub kappa: bool,
}

impl Degenerate {
    pub fn any(&self) -> bool {
        self.precision || self.recall || self.f1 || self.iou || self.kappa
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub oa: f64,
    /// Expected chance agreement.
    pub pre: f64,
    pub kappa: f64,
    pub degenerate: Degenerate,
}

fn ratio(num: f64, den: f64, flag: &mut bool) -> f64 {
    if den == 0.0 {
        *flag = true;
        0.0
    } else {
        num / den
    }
}

pub fn binary_metrics(c: &Confusion) -> Result<BinaryMetrics> {
    let n = c.total();
    if n == 0 {
        return Err(Error::invalid("confusion is empty"));
    }
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let n = n as f64;
    let mut d = Degenerate::default();
    let precision = ratio(tp, tp + fp, &mut d.precision);
    let recall = ratio(tp, tp + fn_, &mut d.recall);
    let f1 = ratio(2.0 * precision * recall, precision + recall, &mut d.f1);
    let iou = ratio(tp, tp + fn_ + fp, &mut d.iou);
    let oa = (tp + tn) / n;
    let pre = ((tp + fn_) * (tp + fp) + (tn + fp) * (tn + fn_)) / (n * n);
    let kappa = ratio(oa - pre, 1.0 - pre, &mut d.kappa);
    Ok(BinaryMetrics {
        precision,
        recall,
        f1,
        iou,
        oa,
        pre,
        kappa,
        degenerate: d,
    })
}

/// How mOA and mKappa are obtained for semantic scoring.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MacroMode {
    /// Unweighted mean of the per-class one-vs-rest values.
    #[default]
    PerClass,
    /// Global OA and Kappa of the pooled multi-class confusion.
    Pooled,
}

impl std::str::FromStr for MacroMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-class" => Ok(MacroMode::PerClass),
            "pooled" => Ok(MacroMode::Pooled),
            _ => Err(Error::invalid(format!("macro mode must be `per-class` or `pooled`, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    pub confusion: Confusion,
    pub metrics: BinaryMetrics,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroScores {
    pub mf1: f64,
    pub miou: f64,
    pub moa: f64,
    pub mkappa: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<ClassReport>,
    pub oa: f64,
    pub kappa: f64,
    pub macro_mode: MacroMode,
    #[serde(rename = "macro")]
    pub macro_scores: MacroScores,
}

impl MetricsReport {
    pub fn binary(c: &Confusion) -> Result<Self> {
        let m = binary_metrics(c)?;
        Ok(Self {
            classes: vec![ClassReport {
                name: "change".into(),
                confusion: *c,
                metrics: m,
            }],
            oa: m.oa,
            kappa: m.kappa,
            macro_mode: MacroMode::PerClass,
            macro_scores: MacroScores {
                mf1: m.f1,
                miou: m.iou,
                moa: m.oa,
                mkappa: m.kappa,
            },
        })
    }

    /// Plain-text table with percentages to two decimals; `*` marks values
    /// defined as 0 because of a zero denominator.
    pub fn to_text(&self) -> String {
        let pct = |v: f64, flagged: bool| format!("{:.2}{}", 100.0 * v, if flagged { "*" } else { "" });
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<16} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "class", "F1", "IoU", "Pre", "Rec", "OA", "Kappa"
        );
        for c in &self.classes {
            let (m, d) = (&c.metrics, &c.metrics.degenerate);
            let _ = writeln!(
                s,
                "{:<16} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
                c.name,
                pct(m.f1, d.f1),
                pct(m.iou, d.iou),
                pct(m.precision, d.precision),
                pct(m.recall, d.recall),
                pct(m.oa, false),
                pct(m.kappa, d.kappa)
            );
        }
        let mm = &self.macro_scores;
        let _ = writeln!(
            s,
            "{:<16} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "mean",
            pct(mm.mf1, false),
            pct(mm.miou, false),
            "",
            "",
            pct(mm.moa, false),
            pct(mm.mkappa, false)
        );
        let _ = writeln!(s, "overall OA {:.2}  Kappa {:.2}", 100.0 * self.oa, 100.0 * self.kappa);
        let mode = match self.macro_mode {
            MacroMode::PerClass => "per-class",
            MacroMode::Pooled => "pooled",
        };
        let _ = writeln!(s, "mOA/mKappa mode: {mode}");
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Semantic scoring: class `i` of `class_names` has index `i + 1`, index 0
/// is background. Both timestamps are pooled into one confusion per class.
pub fn multiclass_metrics(
    pred: [&SemanticMap; 2],
    gt: [&SemanticMap; 2],
    class_names: &[String],
    mode: MacroMode,
) -> Result<MetricsReport> {
    if class_names.is_empty() {
        return Err(Error::invalid("class list is empty"));
    }
    let k = class_names.len();
    let (h, w) = (gt[0].height(), gt[0].width());
    for m in pred.iter().chain(&gt) {
        m.expect_grid(h, w)?;
        if m.max_class() as usize > k {
            return Err(Error::invalid(format!(
                "class index {} outside the {k} configured classes",
                m.max_class()
            )));
        }
    }
    // (k+1)×(k+1) joint counts, row = ground truth, column = prediction
    let side = k + 1;
    let mut joint = vec![0u64; side * side];
    for t in 0..2 {
        for (&p, &g) in pred[t].classes().iter().zip(gt[t].classes()) {
            joint[g as usize * side + p as usize] += 1;
        }
    }
    let n: u64 = joint.iter().sum();
    let row = |i: usize| -> u64 { (0..side).map(|j| joint[i * side + j]).sum() };
    let col = |j: usize| -> u64 { (0..side).map(|i| joint[i * side + j]).sum() };

    let mut classes = Vec::with_capacity(k);
    for (i, name) in class_names.iter().enumerate() {
        let c = i + 1;
        let tp = joint[c * side + c];
        let fp = col(c) - tp;
        let fn_ = row(c) - tp;
        let conf = Confusion::new(tp, fp, fn_, n - tp - fp - fn_);
        classes.push(ClassReport {
            name: name.clone(),
            confusion: conf,
            metrics: binary_metrics(&conf)?,
        });
    }

    let nf = n as f64;
    let agree: u64 = (0..side).map(|i| joint[i * side + i]).sum();
    let oa = agree as f64 / nf;
    let chance: f64 = (0..side).map(|i| row(i) as f64 * col(i) as f64).sum::<f64>() / (nf * nf);
    let kappa = if chance == 1.0 { 0.0 } else { (oa - chance) / (1.0 - chance) };

    let mean = |f: &dyn Fn(&BinaryMetrics) -> f64| classes.iter().map(|c| f(&c.metrics)).sum::<f64>() / k as f64;
    let (moa, mkappa) = match mode {
        MacroMode::PerClass => (mean(&|m| m.oa), mean(&|m| m.kappa)),
        MacroMode::Pooled => (oa, kappa),
    };
    let macro_scores = MacroScores {
        mf1: mean(&|m| m.f1),
        miou: mean(&|m| m.iou),
        moa,
        mkappa,
    };
    Ok(MetricsReport {
        classes,
        oa,
        kappa,
        macro_mode: mode,
        macro_scores,
    })
}
