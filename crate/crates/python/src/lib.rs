//! Python module `egopath`: models, decoders, losses, adaptive cropping and
//! synthetic data.
//!
//! Points are `(x, y)` tuples in original-image pixels, crops are
//! `(left, top, right, bottom)` tuples.

use std::path::PathBuf;

use candle_core::Device;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use egopath_core::augmentation::TrajectoryTarget;
use egopath_core::geometry::{iou, CropRegion, Point};
use egopath_core::inference::{self, AdaptiveCropConfig, EgoPathPrediction};
use egopath_core::loss::{self, anchor_mask, LossConfig};
use egopath_core::model::{build_model, BackboneId, BackboneSpec, HeadSpec, Paradigm};
use egopath_core::synth::{generate_set, write_set, SynthConfig};
use egopath_core::{model, training, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::InvalidConfig(_) | Error::InvalidArgument(_) | Error::UnsupportedBackbone(_) | Error::InvalidCrop(_) | Error::DegeneratePolyline(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn crop_from(t: (f64, f64, f64, f64)) -> PyResult<CropRegion> {
    CropRegion::new(t.0, t.1, t.2, t.3).map_err(py_err)
}

fn crop_tuple(c: &CropRegion) -> (f64, f64, f64, f64) {
    (c.left, c.top, c.right, c.bottom)
}

fn points(p: &[Point]) -> Vec<(f64, f64)> {
    p.iter().map(|p| (p.x, p.y)).collect()
}

fn target(left: Vec<f64>, right: Vec<f64>, y_lim: f64) -> PyResult<TrajectoryTarget> {
    if left.len() != right.len() || left.is_empty() {
        return Err(PyValueError::new_err("left and right need the same, non-zero number of anchors"));
    }
    let mask = anchor_mask(y_lim, left.len());
    Ok(TrajectoryTarget { left, right, y_lim, mask })
}

fn loss_config(w_max: Option<f64>) -> LossConfig {
    let mut cfg = LossConfig::default();
    if let Some(w) = w_max {
        cfg.w_max = w;
    }
    cfg
}

/// A decoded ego-path in original-image coordinates.
#[pyclass(name = "Prediction", module = "egopath", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyPrediction(EgoPathPrediction);

#[pymethods]
impl PyPrediction {
    #[getter]
    fn paradigm(&self) -> &'static str {
        self.0.paradigm.name()
    }

    #[getter]
    fn left(&self) -> Vec<(f64, f64)> {
        points(&self.0.left)
    }

    #[getter]
    fn right(&self) -> Vec<(f64, f64)> {
        points(&self.0.right)
    }

    fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Bounding box `(left, top, right, bottom)` of the path, if any.
    fn bounding_box(&self) -> Option<(f64, f64, f64, f64)> {
        self.0.bounding_box()
    }

    /// Ego-path mask as rows of booleans.
    fn mask(&self, width: usize, height: usize) -> Vec<Vec<bool>> {
        let m = self.0.to_mask(width, height);
        m.as_slice().chunks(width).map(|r| r.to_vec()).collect()
    }

    /// IoU of the two rasterized paths.
    fn iou(&self, other: &PyPrediction, width: usize, height: usize) -> PyResult<f64> {
        iou(&self.0.to_mask(width, height), &other.0.to_mask(width, height)).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Prediction(paradigm={:?}, points={})", self.paradigm(), self.0.left.len())
    }
}

/// A network: backbone plus regression, classification or segmentation head.
#[pyclass(name = "Model", module = "egopath")]
struct PyModel(model::Model);

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (paradigm = "regression", backbone = "resnet18", input_size = 512, seed = 0))]
    fn new(paradigm: &str, backbone: &str, input_size: usize, seed: u64) -> PyResult<Self> {
        let paradigm: Paradigm = paradigm.parse().map_err(py_err)?;
        let backbone: BackboneId = backbone.parse().map_err(py_err)?;
        let m = build_model(&BackboneSpec::new(backbone), &HeadSpec::default_for(paradigm), None, input_size, seed, &Device::Cpu).map_err(py_err)?;
        Ok(Self(m))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (m, _) = model::Model::load(&path, &Device::Cpu).map_err(py_err)?;
        Ok(Self(m))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path, "", &Default::default()).map_err(py_err)
    }

    #[getter]
    fn paradigm(&self) -> &'static str {
        self.0.paradigm().name()
    }

    #[getter]
    fn backbone(&self) -> &'static str {
        self.0.spec().backbone.id.name()
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.0.spec().input_size
    }

    fn parameter_count(&self) -> usize {
        self.0.parameter_count()
    }

    /// `(parameters, multiply-accumulates)` of one forward pass.
    fn params_and_macs(&self) -> PyResult<(usize, u64)> {
        self.0.params_and_macs().map_err(py_err)
    }

    /// Predicts the ego-path of an image file; the crop defaults to the full image.
    #[pyo3(signature = (image_path, crop = None))]
    fn predict(&self, py: Python<'_>, image_path: PathBuf, crop: Option<(f64, f64, f64, f64)>) -> PyResult<PyPrediction> {
        let image = image::open(&image_path).map_err(|e| PyValueError::new_err(format!("{}: {e}", image_path.display())))?.to_rgb8();
        let crop = match crop {
            Some(c) => crop_from(c)?,
            None => CropRegion::full(image.width(), image.height()),
        };
        py.detach(|| inference::predict(&self.0, &image, &crop)).map(PyPrediction).map_err(py_err)
    }

    /// Forward-pass latency in milliseconds: mean, std and percentiles.
    #[pyo3(signature = (iterations = 20, warmup = 3))]
    fn benchmark<'py>(&self, py: Python<'py>, iterations: usize, warmup: usize) -> PyResult<Bound<'py, PyDict>> {
        let r = py.detach(|| inference::benchmark_latency(&self.0, iterations, warmup)).map_err(py_err)?;
        let d = PyDict::new(py);
        for (k, v) in [
            ("mean_ms", r.mean_ms),
            ("std_ms", r.std_ms),
            ("min_ms", r.min_ms),
            ("p50_ms", r.p50_ms),
            ("p90_ms", r.p90_ms),
            ("p99_ms", r.p99_ms),
            ("max_ms", r.max_ms),
        ] {
            d.set_item(k, v)?;
        }
        d.set_item("iterations", r.iterations)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!("Model({}, {}, input_size={})", self.paradigm(), self.backbone(), self.input_size())
    }
}

/// Adaptive crop of one video stream.
#[pyclass(name = "CropState", module = "egopath")]
struct PyCropState(inference::CropState);

#[pymethods]
impl PyCropState {
    #[new]
    #[pyo3(signature = (width, height, ema_factor = 0.1, global_blend = 0.2, margins = 0.15, min_fraction = 0.2))]
    fn new(width: u32, height: u32, ema_factor: f64, global_blend: f64, margins: f64, min_fraction: f64) -> PyResult<Self> {
        let cfg = AdaptiveCropConfig { ema_factor, global_blend, margins, min_fraction };
        let v = cfg.violations();
        if !v.is_empty() {
            return Err(py_err(Error::InvalidConfig(v)));
        }
        Ok(Self(inference::CropState::new((width, height), cfg)))
    }

    #[getter]
    fn crop(&self) -> (f64, f64, f64, f64) {
        crop_tuple(&self.0.crop)
    }

    #[getter]
    fn frame(&self) -> usize {
        self.0.frame
    }

    /// Folds in the prediction of the current frame and returns the next crop.
    fn update(&mut self, prediction: &PyPrediction) -> (f64, f64, f64, f64) {
        self.0 = inference::adaptive_crop_update(&self.0, &prediction.0);
        self.crop()
    }
}

#[pyfunction]
fn smooth_l1(x: f64, beta: f64) -> PyResult<f64> {
    loss::smooth_l1(x, beta).map_err(py_err)
}

#[pyfunction]
fn perspective_weight(x_left: f64, x_right: f64, w_max: f64) -> PyResult<f64> {
    loss::perspective_weight(x_left, x_right, w_max).map_err(py_err)
}

#[pyfunction]
fn anchor_validity(y_lim: f64, anchors: usize) -> Vec<bool> {
    anchor_mask(y_lim, anchors)
}

/// Trajectory term for a prediction `[x_left..., x_right...]`.
#[pyfunction]
#[pyo3(signature = (prediction, left, right, y_lim, w_max = None))]
fn trajectory_loss(prediction: Vec<f64>, left: Vec<f64>, right: Vec<f64>, y_lim: f64, w_max: Option<f64>) -> PyResult<f64> {
    loss::trajectory_loss(&prediction, &target(left, right, y_lim)?, &loss_config(w_max)).map_err(py_err)
}

/// Trajectory plus weighted y-limit loss for a `2H + 1` prediction vector.
#[pyfunction]
#[pyo3(signature = (prediction, left, right, y_lim, w_max = None))]
fn composite_loss(prediction: Vec<f64>, left: Vec<f64>, right: Vec<f64>, y_lim: f64, w_max: Option<f64>) -> PyResult<f64> {
    loss::composite_loss(&prediction, &target(left, right, y_lim)?, &loss_config(w_max)).map_err(py_err)
}

#[pyfunction]
fn dice_loss(probabilities: Vec<f64>, target: Vec<bool>) -> PyResult<f64> {
    loss::dice_loss(&probabilities, &target).map_err(py_err)
}

/// Mean cross-entropy over rows of `classes` logits.
#[pyfunction]
fn cross_entropy(logits: Vec<f64>, targets: Vec<usize>, classes: usize) -> PyResult<f64> {
    loss::rowwise_cross_entropy(&logits, &targets, classes).map_err(py_err)
}

#[pyfunction]
fn decode_regression(vector: Vec<f64>, crop: (f64, f64, f64, f64)) -> PyResult<PyPrediction> {
    inference::decode_regression(&vector, &crop_from(crop)?).map(PyPrediction).map_err(py_err)
}

#[pyfunction]
fn one_cycle_lr(step: usize, total_steps: usize, peak: f64) -> PyResult<f64> {
    training::one_cycle_lr(step, total_steps, peak).map_err(py_err)
}

/// 1-based epoch with the lowest validation loss in the final 10% of epochs.
#[pyfunction]
fn select_checkpoint(val_losses: Vec<f64>, configured_epochs: usize) -> PyResult<usize> {
    training::select_checkpoint(&val_losses, configured_epochs).map_err(py_err)
}

/// Renders `count` synthetic scenes into `directory`; returns their ids.
#[pyfunction]
#[pyo3(signature = (directory, count, seed = 0, width = 320, height = 240))]
fn write_synthetic_set(py: Python<'_>, directory: PathBuf, count: usize, seed: u64, width: u32, height: u32) -> PyResult<Vec<String>> {
    let cfg = SynthConfig { width, height, ..SynthConfig::default() };
    py.detach(|| {
        let scenes = generate_set(seed, count, &cfg)?;
        write_set(&directory, &scenes)?;
        Ok(scenes.into_iter().map(|s| s.annotation.image_id).collect())
    })
    .map_err(py_err)
}

#[pymodule]
pub fn egopath(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPrediction>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyCropState>()?;
    m.add_function(wrap_pyfunction!(smooth_l1, m)?)?;
    m.add_function(wrap_pyfunction!(perspective_weight, m)?)?;
    m.add_function(wrap_pyfunction!(anchor_validity, m)?)?;
    m.add_function(wrap_pyfunction!(trajectory_loss, m)?)?;
    m.add_function(wrap_pyfunction!(composite_loss, m)?)?;
    m.add_function(wrap_pyfunction!(dice_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(decode_regression, m)?)?;
    m.add_function(wrap_pyfunction!(one_cycle_lr, m)?)?;
    m.add_function(wrap_pyfunction!(select_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(write_synthetic_set, m)?)?;
    m.add("BACKBONES", BackboneId::ALL.iter().map(|b| b.name()).collect::<Vec<_>>())?;
    Ok(())
}
