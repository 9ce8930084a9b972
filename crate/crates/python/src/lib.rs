//! Python bindings: frames, normalization, embedding, CTC, metrics, synthetic
//! data and gesture model training, loading and prediction.

use std::path::PathBuf;

use gestureforge_core::embedder::{EmbeddingConfig, EmbeddingModel};
use gestureforge_core::fingerspell;
use gestureforge_core::gesture::{self, kshot_sample, label_map_for, GestureHeadConfig, Regime, TrainSpec};
use gestureforge_core::landmark::{self, FrameLandmarks, Handedness, NormalizationConfig, NUM_LANDMARKS};
use gestureforge_core::metrics;
use gestureforge_core::modelfile::{self, Artifact};
use gestureforge_core::nn::Tensor2;
use gestureforge_core::synth::{self, GenSpec};
use gestureforge_core::Error;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(format!("{}: {other}", other.code())),
    }
}

/// One detected hand: 21 (x, y, z) landmarks, handedness and a timestamp.
#[pyclass(name = "FrameLandmarks", from_py_object)]
#[derive(Clone)]
struct PyFrame {
    inner: FrameLandmarks,
}

#[pymethods]
impl PyFrame {
    #[new]
    #[pyo3(signature = (points, handedness = "right", t_ms = 0))]
    fn new(points: Vec<[f64; 3]>, handedness: &str, t_ms: i64) -> PyResult<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(PyValueError::new_err(format!(
                "expected {NUM_LANDMARKS} points, found {}",
                points.len()
            )));
        }
        let hand: Handedness = handedness.parse().map_err(py_err)?;
        let mut pts = [[0.0; 3]; NUM_LANDMARKS];
        pts.copy_from_slice(&points);
        let inner = FrameLandmarks::from_points(pts, hand, t_ms);
        inner.validate().map_err(py_err)?;
        Ok(PyFrame { inner })
    }

    #[getter]
    fn points(&self) -> Vec<[f64; 3]> {
        self.inner.points.to_vec()
    }

    #[getter]
    fn handedness(&self) -> &'static str {
        self.inner.handedness.as_str()
    }

    #[getter]
    fn t_ms(&self) -> i64 {
        self.inner.timestamp_ms
    }

    #[getter]
    fn hand_scale(&self) -> f64 {
        self.inner.location.hand_scale
    }

    /// Translation-, scale- and handedness-normalized coordinates (63 values).
    fn normalized(&self) -> PyResult<Vec<f64>> {
        Ok(
            landmark::normalize_landmarks(&self.inner, &NormalizationConfig::default())
                .map_err(py_err)?
                .to_vec(),
        )
    }

    fn __repr__(&self) -> String {
        format!(
            "FrameLandmarks(handedness={:?}, t_ms={})",
            self.handedness(),
            self.inner.timestamp_ms
        )
    }
}

fn frames(v: &[PyFrame]) -> Vec<FrameLandmarks> {
    v.iter().map(|f| f.inner.clone()).collect()
}

#[pyclass(name = "EmbeddingModel", from_py_object)]
#[derive(Clone)]
struct PyEmbedder {
    inner: EmbeddingModel,
}

#[pymethods]
impl PyEmbedder {
    #[new]
    #[pyo3(signature = (seed = 0))]
    fn new(seed: u64) -> PyResult<Self> {
        Ok(PyEmbedder {
            inner: EmbeddingModel::new(EmbeddingConfig::default(), seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyEmbedder {
            inner: modelfile::load_embedder(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        modelfile::save(&Artifact::Embedder(self.inner.clone()), &path).map_err(py_err)
    }

    /// Same architecture with fresh weights drawn from `seed`.
    fn randomize(&self, seed: u64) -> Self {
        PyEmbedder {
            inner: self.inner.randomize(seed),
        }
    }

    /// Embedding of one frame of one or two hands.
    fn embed_frame(&self, hands: Vec<PyFrame>) -> PyResult<Vec<f64>> {
        self.inner
            .embed_frame(&frames(&hands), &NormalizationConfig::default())
            .map_err(py_err)
    }
}

#[pyclass(name = "GestureModel")]
struct PyGestureModel {
    inner: gesture::GestureModel,
}

#[pymethods]
impl PyGestureModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyGestureModel {
            inner: modelfile::load_model(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        modelfile::save_model(&self.inner, &path).map_err(py_err)
    }

    #[getter]
    fn label_map(&self) -> Vec<String> {
        self.inner.label_map.clone()
    }

    fn probabilities(&self, hands: Vec<PyFrame>) -> PyResult<Vec<f64>> {
        self.inner.probabilities(&frames(&hands)).map_err(py_err)
    }

    /// (label, probability) pairs, most likely first.
    fn predict(&self, hands: Vec<PyFrame>) -> PyResult<Vec<(String, f64)>> {
        self.inner.predict(&frames(&hands)).map_err(py_err)
    }

    fn embedder(&self) -> PyEmbedder {
        PyEmbedder {
            inner: self.inner.embedder.clone_weights(),
        }
    }
}

type PySample = (PyFrame, String);

fn samples(data: Vec<PySample>) -> Vec<gesture::LabeledFrame> {
    data.into_iter().map(|(f, l)| (f.inner, l)).collect()
}

/// Draws K samples per class and trains a gesture model.
#[pyfunction]
#[pyo3(signature = (embedder, data, regime, k, seed = 0, epochs = None))]
fn train(
    py: Python<'_>,
    embedder: &PyEmbedder,
    data: Vec<PySample>,
    regime: &str,
    k: usize,
    seed: u64,
    epochs: Option<usize>,
) -> PyResult<PyGestureModel> {
    let regime: Regime = regime.parse().map_err(py_err)?;
    let mut spec = TrainSpec::new(regime, k, seed);
    if let Some(e) = epochs {
        spec.epochs = e;
    }
    let data = samples(data);
    let pretrained = embedder.inner.clone_weights();
    let model = py
        .detach(move || {
            let (train_split, _) = kshot_sample(&data, spec.k, spec.seed)?;
            let cfg = GestureHeadConfig::new(label_map_for(&train_split).len() - 1);
            gesture::train(&pretrained, &train_split, &cfg, &spec)
        })
        .map_err(py_err)?;
    Ok(PyGestureModel { inner: model })
}

/// Confusion matrix and aggregate rates of `model` on labeled samples.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, model: &PyGestureModel, data: Vec<PySample>) -> PyResult<Bound<'py, PyDict>> {
    let r = metrics::evaluate(&model.inner, &samples(data)).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("labels", r.confusion.labels.clone())?;
    d.set_item("confusion", r.confusion.counts.clone())?;
    d.set_item("sensitivity", r.sensitivity)?;
    d.set_item("specificity", r.specificity)?;
    d.set_item("ss_f1", r.ss_f1)?;
    d.set_item("complementary_ss_f1", r.complementary_ss_f1)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (classes, per_class, background = 0, seed = 0, noise = 0.01))]
fn gen_gesture_dataset(
    classes: Vec<String>,
    per_class: usize,
    background: usize,
    seed: u64,
    noise: f64,
) -> PyResult<Vec<PySample>> {
    let names: Vec<&str> = classes.iter().map(String::as_str).collect();
    let gen = GenSpec {
        seed,
        noise_sigma: noise,
        ..GenSpec::default()
    };
    Ok(synth::gen_gesture_dataset(&names, per_class, background, &gen)
        .map_err(py_err)?
        .into_iter()
        .map(|(f, l)| (PyFrame { inner: f }, l))
        .collect())
}

#[pyfunction]
fn builtin_gestures() -> Vec<&'static str> {
    synth::BUILTIN_GESTURES.to_vec()
}

#[pyfunction]
fn normalize_landmarks(frame: &PyFrame) -> PyResult<Vec<f64>> {
    frame.normalized()
}

#[pyfunction]
fn mnae(predicted: Vec<PyFrame>, truth: Vec<PyFrame>) -> PyResult<f64> {
    landmark::mnae(&frames(&predicted), &frames(&truth)).map_err(py_err)
}

fn tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor2> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Tensor2::new(rows.len(), cols, rows.concat()).map_err(py_err)
}

/// CTC loss of per-step log-probabilities (blank is class 0). Returns
/// `(loss, gradient w.r.t. logits, infeasible)`.
#[pyfunction]
fn ctc_loss(log_probs: Vec<Vec<f64>>, target: Vec<usize>) -> PyResult<(f64, Vec<Vec<f64>>, bool)> {
    let lp = tensor(log_probs)?;
    let out = fingerspell::ctc_loss(&lp, &target).map_err(py_err)?;
    let grad = (0..out.grad.rows()).map(|r| out.grad.row(r).to_vec()).collect();
    Ok((out.loss, grad, out.infeasible))
}

#[pyfunction]
fn greedy_decode(log_probs: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
    Ok(fingerspell::greedy_decode(&tensor(log_probs)?))
}

#[pyfunction]
fn edit_distance(a: Vec<usize>, b: Vec<usize>) -> usize {
    fingerspell::edit_distance(&a, &b)
}

#[pyfunction]
fn ss_f1(sensitivity: f64, specificity: f64) -> f64 {
    metrics::ss_f1(sensitivity, specificity)
}

#[pyfunction]
fn complementary_ss_f1(sensitivity: f64, specificity: f64) -> f64 {
    metrics::complementary_ss_f1(sensitivity, specificity)
}

#[pymodule(name = "gestureforge")]
fn gestureforge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyFrame>()?;
    m.add_class::<PyEmbedder>()?;
    m.add_class::<PyGestureModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gen_gesture_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(builtin_gestures, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_landmarks, m)?)?;
    m.add_function(wrap_pyfunction!(mnae, m)?)?;
    m.add_function(wrap_pyfunction!(ctc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(greedy_decode, m)?)?;
    m.add_function(wrap_pyfunction!(edit_distance, m)?)?;
    m.add_function(wrap_pyfunction!(ss_f1, m)?)?;
    m.add_function(wrap_pyfunction!(complementary_ss_f1, m)?)?;
    Ok(())
}
