//! Python bindings. Build with `--features extension-module` and import the
//! resulting shared library as `ovcd_py`.

use std::path::PathBuf;

use ovcd::backbone::{BackboneConfig, MockBackbone, RawFeatures};
use ovcd::head::{archive, ChangeHead, HeadConfig};
use ovcd::maps;
use ovcd::metrics;
use ovcd::pipeline;
use ovcd::tensor;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: ovcd::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "Tensor", module = "ovcd_py", from_py_object)]
#[derive(Clone)]
pub struct Tensor(pub tensor::Tensor);

#[pymethods]
impl Tensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        tensor::Tensor::new(shape, data).map(Self).map_err(err)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

#[pyclass(name = "ChangeMap", module = "ovcd_py", from_py_object)]
#[derive(Clone)]
pub struct ChangeMap(pub maps::ChangeMap);

#[pymethods]
impl ChangeMap {
    #[new]
    fn new(height: usize, width: usize, data: Vec<u8>) -> PyResult<Self> {
        maps::ChangeMap::new(height, width, data).map(Self).map_err(err)
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    #[getter]
    fn data(&self) -> Vec<u8> {
        self.0.data().to_vec()
    }

    fn changed(&self) -> usize {
        self.0.changed()
    }
}

#[pyclass(name = "SemanticMap", module = "ovcd_py", from_py_object)]
#[derive(Clone)]
pub struct SemanticMap(pub maps::SemanticMap);

#[pymethods]
impl SemanticMap {
    #[new]
    fn new(height: usize, width: usize, classes: Vec<u32>) -> PyResult<Self> {
        maps::SemanticMap::new(height, width, classes).map(Self).map_err(err)
    }

    #[getter]
    fn classes(&self) -> Vec<u32> {
        self.0.classes().to_vec()
    }
}

#[pyclass(name = "Features", module = "ovcd_py")]
pub struct Features(pub RawFeatures);

#[pymethods]
impl Features {
    #[getter]
    fn layers(&self) -> Vec<usize> {
        self.0.layers.clone()
    }

    fn level(&self, timestamp: usize, index: usize) -> PyResult<Tensor> {
        let set = match timestamp {
            1 => &self.0.t1,
            2 => &self.0.t2,
            _ => return Err(PyValueError::new_err("timestamp must be 1 or 2")),
        };
        set.get(index)
            .cloned()
            .map(Tensor)
            .ok_or_else(|| PyValueError::new_err(format!("no feature level {index}")))
    }
}

#[pyclass(name = "MockBackbone", module = "ovcd_py")]
pub struct Backbone(MockBackbone);

#[pymethods]
impl Backbone {
    /// `reduced` selects the small configuration used on synthetic data.
    #[new]
    #[pyo3(signature = (seed = 0, reduced = false))]
    fn new(seed: u64, reduced: bool) -> PyResult<Self> {
        let base = if reduced { BackboneConfig::reduced() } else { BackboneConfig::default() };
        MockBackbone::new(BackboneConfig { seed, ..base }).map(Self).map_err(err)
    }

    fn extract_features(&self, image1: &Tensor, image2: &Tensor) -> PyResult<Features> {
        self.0.extract_features(&image1.0, &image2.0).map(Features).map_err(err)
    }
}

#[pyclass(name = "ChangeHead", module = "ovcd_py")]
pub struct Head(ChangeHead);

#[pymethods]
impl Head {
    #[new]
    #[pyo3(signature = (seed = 0, reduced = false))]
    fn new(seed: u64, reduced: bool) -> PyResult<Self> {
        let base = if reduced { HeadConfig::reduced() } else { HeadConfig::default() };
        ChangeHead::new(HeadConfig { seed, ..base }).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        archive::load(path).map(|c| Self(c.head)).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        archive::save(path, &self.0, None).map_err(err)
    }

    fn learnable_count(&self) -> usize {
        self.0.learnable_count()
    }

    /// Returns the change map and the `[2,H,W]` logits.
    fn predict(&self, features: &Features, height: usize, width: usize) -> PyResult<(ChangeMap, Tensor)> {
        let p = self.0.predict(&features.0, height, width).map_err(err)?;
        Ok((ChangeMap(p.change), Tensor(p.logits)))
    }
}

#[pyfunction]
#[pyo3(signature = (x, weight, bias = None, stride = 1, padding = 0))]
fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> PyResult<Tensor> {
    ovcd::ops::conv2d(&x.0, &weight.0, bias.as_ref().map(|b| &b.0), stride, padding)
        .map(Tensor)
        .map_err(err)
}

#[pyfunction]
#[pyo3(signature = (x, weight, bias = None, stride = 2))]
fn deconv2d(x: &Tensor, weight: &Tensor, bias: Option<Tensor>, stride: usize) -> PyResult<Tensor> {
    ovcd::ops::deconv2d(&x.0, &weight.0, bias.as_ref().map(|b| &b.0), stride)
        .map(Tensor)
        .map_err(err)
}

#[pyfunction]
fn bilinear_resize(x: &Tensor, height: usize, width: usize) -> PyResult<Tensor> {
    ovcd::ops::bilinear_resize(&x.0, height, width).map(Tensor).map_err(err)
}

#[pyfunction]
fn softmax(x: &Tensor) -> PyResult<Tensor> {
    ovcd::ops::softmax_last(&x.0).map(Tensor).map_err(err)
}

#[pyfunction]
fn gelu(v: f64) -> f64 {
    ovcd::ops::gelu(v)
}

#[pyfunction]
fn confusion(pred: &ChangeMap, gt: &ChangeMap) -> PyResult<(u64, u64, u64, u64)> {
    let c = metrics::confusion(&pred.0, &gt.0).map_err(err)?;
    Ok((c.tp, c.fp, c.fn_, c.tn))
}

/// Precision, recall, F1, IoU, OA and kappa for the given counts.
#[pyfunction]
#[pyo3(name = "binary_metrics")]
fn binary_metrics_py(py: Python<'_>, tp: u64, fp: u64, fn_: u64, tn: u64) -> PyResult<Bound<'_, PyDict>> {
    let m = metrics::binary_metrics(&metrics::Confusion::new(tp, fp, fn_, tn)).map_err(err)?;
    let d = PyDict::new(py);
    for (k, v) in [
        ("precision", m.precision),
        ("recall", m.recall),
        ("f1", m.f1),
        ("iou", m.iou),
        ("oa", m.oa),
        ("kappa", m.kappa),
    ] {
        d.set_item(k, v)?;
    }
    d.set_item("degenerate", m.degenerate.any())?;
    Ok(d)
}

#[pyfunction]
fn compose_binary(change: &ChangeMap, sem1: &SemanticMap, sem2: &SemanticMap, foreground: Vec<u32>) -> PyResult<ChangeMap> {
    pipeline::compose_binary(&change.0, &sem1.0, &sem2.0, &foreground.into_iter().collect())
        .map(ChangeMap)
        .map_err(err)
}

#[pyfunction]
fn compose_semantic(change: &ChangeMap, sem: &SemanticMap) -> PyResult<SemanticMap> {
    pipeline::compose_semantic(&change.0, &sem.0).map(SemanticMap).map_err(err)
}

#[pyfunction]
fn beta_threshold(theta_degrees: f64) -> PyResult<f64> {
    pipeline::beta_threshold(theta_degrees).map_err(err)
}

#[pyfunction]
fn tile_offsets(dim: usize, window: usize, stride: usize) -> PyResult<Vec<usize>> {
    ovcd::data::tile_offsets(dim, window, stride).map_err(err)
}

/// Runs the command-line front end; returns its exit code.
#[pyfunction]
fn cli(args: Vec<String>) -> i32 {
    let argv = std::iter::once("ovcd".to_string()).chain(args);
    match ovcd::app::run_from(argv) {
        Ok(()) => 0,
        Err(e) => {
            let _ = e.print();
            e.exit_code()
        }
    }
}

#[pymodule]
fn ovcd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Tensor>()?;
    m.add_class::<ChangeMap>()?;
    m.add_class::<SemanticMap>()?;
    m.add_class::<Features>()?;
    m.add_class::<Backbone>()?;
    m.add_class::<Head>()?;
    m.add_function(wrap_pyfunction!(conv2d, m)?)?;
    m.add_function(wrap_pyfunction!(deconv2d, m)?)?;
    m.add_function(wrap_pyfunction!(bilinear_resize, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(gelu, m)?)?;
    m.add_function(wrap_pyfunction!(confusion, m)?)?;
    m.add_function(wrap_pyfunction!(binary_metrics_py, m)?)?;
    m.add_function(wrap_pyfunction!(compose_binary, m)?)?;
    m.add_function(wrap_pyfunction!(compose_semantic, m)?)?;
    m.add_function(wrap_pyfunction!(beta_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(tile_offsets, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    Ok(())
}
