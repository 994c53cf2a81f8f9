//! Python bindings. Reports come back as plain dicts; motion as nested
//! lists of `[frames][vertices * 3]` offsets.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use jambatalk::ablate::ablate as run_ablation;
use jambatalk::attention::{rope_rotate, rope_thetas};
use jambatalk::audio::{load_wav, AudioInput};
use jambatalk::bench::benchmark as run_benchmark;
use jambatalk::config::{EvalMode, RunConfig};
use jambatalk::data::{Dataset as CoreDataset, Split};
use jambatalk::eval::evaluate as run_evaluation;
use jambatalk::gradcheck::gradient_suite as run_gradient_suite;
use jambatalk::mamba::discretize as core_discretize;
use jambatalk::metrics::{sequence_metrics, VertexMask};
use jambatalk::model::JambaTalk;
use jambatalk::motion::MotionSequence;
use jambatalk::train::train as run_training;
use jambatalk::{Error, Tensor};

fn err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Config(_) | Error::Lookup(_) | Error::Shape { .. } | Error::Contract(_) => PyValueError::new_err(msg),
        Error::Numeric(_) => PyArithmeticError::new_err(msg),
        Error::Io(_) | Error::Load(_) | Error::Format(_) => PyOSError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn to_dict<'py>(py: Python<'py>, json: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (json,))
}

fn json_err(e: serde_json::Error) -> PyErr {
    err(Error::Json(e))
}

fn rows_to_tensor(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Tensor::new(rows.concat(), &[rows.len(), width]).map_err(err)
}

fn motion_rows(m: &MotionSequence) -> Vec<Vec<f64>> {
    (0..m.frames()).map(|t| m.frame(t).to_vec()).collect()
}

fn rows_to_motion(rows: &[Vec<f64>], fps: f32) -> PyResult<MotionSequence> {
    let width = rows.first().map_or(0, Vec::len);
    if width % 3 != 0 || rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("motion rows must share a length divisible by 3"));
    }
    MotionSequence::new(rows.concat(), rows.len(), width / 3, fps).map_err(err)
}

/// Run configuration: optional TOML file, then `section.key=value` overrides.
#[pyclass(name = "RunConfig", unsendable)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (path = None, overrides = Vec::new(), seed = None))]
    fn new(path: Option<PathBuf>, overrides: Vec<String>, seed: Option<u64>) -> PyResult<Self> {
        let base = match path {
            Some(p) => RunConfig::load(&p).map_err(err)?,
            None => RunConfig::default(),
        };
        let mut inner = base.with_overrides(&overrides).map_err(err)?;
        if let Some(s) = seed {
            inner.seed = s;
        }
        inner.validate().map_err(err)?;
        Ok(PyRunConfig { inner })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    /// Returns a copy with more overrides applied.
    fn with_overrides(&self, overrides: Vec<String>) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: self.inner.with_overrides(&overrides).map_err(err)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(err)
    }

    /// Loads or generates the configured dataset and aligns the model shape
    /// in this config with it.
    fn load_data(&mut self) -> PyResult<PyDataset> {
        Ok(PyDataset {
            inner: self.inner.load_data().map_err(err)?,
        })
    }
}

#[pyclass(name = "Dataset", unsendable)]
struct PyDataset {
    inner: CoreDataset,
}

#[pymethods]
impl PyDataset {
    fn __len__(&self) -> usize {
        self.inner.records.len()
    }

    #[getter]
    fn vertex_count(&self) -> usize {
        self.inner.vertex_count
    }

    #[getter]
    fn subjects(&self) -> Vec<String> {
        self.inner.subjects.clone()
    }

    #[getter]
    fn sequence_ids(&self) -> Vec<String> {
        self.inner.records.iter().map(|r| r.sentence_id.clone()).collect()
    }

    /// Ground-truth offsets of one sequence.
    fn motion(&self, index: usize) -> PyResult<Vec<Vec<f64>>> {
        let r = self
            .inner
            .records
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("no sequence {index}")))?;
        Ok(motion_rows(&r.motion))
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save_dir(&dir).map_err(err)
    }
}

#[pyclass(name = "Model", unsendable)]
struct PyModel {
    inner: JambaTalk,
}

#[pymethods]
impl PyModel {
    /// Fresh model from a config, seeded with the config's seed.
    #[new]
    fn new(config: &PyRunConfig) -> PyResult<Self> {
        Ok(PyModel {
            inner: JambaTalk::new(&config.inner.model, config.inner.seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: JambaTalk::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn active_params(&self) -> usize {
        self.inner.num_params() - self.inner.decoder.num_params() + self.inner.decoder.active_params()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.params().iter().map(|p| p.name().to_string()).collect()
    }

    #[getter]
    fn arrangement(&self) -> String {
        self.inner.cfg.decoder.arrangement.label().into()
    }

    /// Animates precomputed `[T', D]` speech features; `frames` defaults to `T'`.
    #[pyo3(signature = (features, subject = 0, frames = None, fps = 30.0))]
    fn generate(&self, features: Vec<Vec<f64>>, subject: usize, frames: Option<usize>, fps: f32) -> PyResult<Vec<Vec<f64>>> {
        let frames = frames.unwrap_or(features.len());
        let input = AudioInput::Features(rows_to_tensor(&features)?);
        Ok(motion_rows(&self.inner.generate(&input, subject, frames, fps).map_err(err)?))
    }

    /// Animates a mono 16 kHz WAV file; `frames` defaults to its duration.
    #[pyo3(signature = (path, subject = 0, frames = None, fps = 30.0))]
    fn generate_wav(&self, path: PathBuf, subject: usize, frames: Option<usize>, fps: f32) -> PyResult<Vec<Vec<f64>>> {
        let wave = load_wav(&path).map_err(err)?;
        let rate = f64::from(self.inner.cfg.audio.sample_rate);
        let frames = frames.unwrap_or((wave.len() as f64 / rate * f64::from(fps)).round() as usize);
        let out = self.inner.generate(&AudioInput::Waveform(wave), subject, frames, fps).map_err(err)?;
        Ok(motion_rows(&out))
    }
}

/// Trains in place; returns the training report.
#[pyfunction]
#[pyo3(signature = (model, dataset, config, curve_csv = None))]
fn train<'py>(py: Python<'py>, model: &PyModel, dataset: &PyDataset, config: &PyRunConfig, curve_csv: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let rep = run_training(&model.inner, &dataset.inner, &config.inner.train, config.inner.seed).map_err(err)?;
    if let Some(p) = curve_csv {
        rep.write_csv(&p).map_err(err)?;
    }
    to_dict(py, &serde_json::to_string(&rep).map_err(json_err)?)
}

/// Per-sequence and mean LVE / FDD in metres.
#[pyfunction]
#[pyo3(signature = (model, dataset, split = None, mode = "autoregressive"))]
fn evaluate<'py>(py: Python<'py>, model: &PyModel, dataset: &PyDataset, split: Option<&str>, mode: &str) -> PyResult<Bound<'py, PyAny>> {
    let split = match split {
        None => None,
        Some("train") => Some(Split::Train),
        Some("val") => Some(Split::Val),
        Some("test") => Some(Split::Test),
        Some(other) => return Err(PyValueError::new_err(format!("unknown split {other:?}"))),
    };
    let mode = match mode {
        "autoregressive" => EvalMode::Autoregressive,
        "teacher_forced" => EvalMode::TeacherForced,
        other => return Err(PyValueError::new_err(format!("unknown mode {other:?}"))),
    };
    let rep = run_evaluation(&model.inner, &dataset.inner, split, mode).map_err(err)?;
    to_dict(py, &rep.to_json().map_err(err)?)
}

/// Trains and scores all four layer arrangements.
#[pyfunction]
fn ablate<'py>(py: Python<'py>, config: &PyRunConfig, dataset: &PyDataset) -> PyResult<Bound<'py, PyAny>> {
    let rep = run_ablation(&config.inner, &dataset.inner);
    to_dict(py, &rep.to_json().map_err(err)?)
}

#[pyfunction]
#[pyo3(signature = (model, lengths, repeats = 1, seed = 0))]
fn benchmark<'py>(py: Python<'py>, model: &PyModel, lengths: Vec<usize>, repeats: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let rep = run_benchmark(&model.inner.decoder, &lengths, repeats, seed).map_err(err)?;
    to_dict(py, &rep.to_json().map_err(err)?)
}

/// Finite-difference gradient checks; `coords` samples per parameter.
#[pyfunction]
#[pyo3(signature = (seed = 0, coords = None))]
fn gradient_suite<'py>(py: Python<'py>, seed: u64, coords: Option<usize>) -> PyResult<Bound<'py, PyAny>> {
    let rows = run_gradient_suite(seed, coords).map_err(err)?;
    to_dict(py, &serde_json::to_string(&rows).map_err(json_err)?)
}

/// LVE and FDD of one predicted sequence against ground truth.
#[pyfunction]
fn metrics<'py>(py: Python<'py>, pred: Vec<Vec<f64>>, gt: Vec<Vec<f64>>, lip: Vec<usize>, upper: Vec<usize>) -> PyResult<Bound<'py, PyAny>> {
    let (p, g) = (rows_to_motion(&pred, 30.0)?, rows_to_motion(&gt, 30.0)?);
    let mask = VertexMask::new(lip, upper, g.vertices()).map_err(err)?;
    let m = sequence_metrics(&p, &g, &mask).map_err(err)?;
    to_dict(py, &serde_json::to_string(&m).map_err(json_err)?)
}

/// Zero-order hold of one diagonal state entry: `(Â, B̂)`.
#[pyfunction]
fn discretize(a: f64, b: f64, delta: f64) -> PyResult<(f64, f64)> {
    let one = |v: f64| Tensor::new(vec![v], &[1, 1]).map_err(err);
    let (ab, bb) = core_discretize(&one(a)?, &one(b)?, &one(delta)?).map_err(err)?;
    Ok((ab.item(), bb.item()))
}

/// Rotary position embedding of one head vector at position `m`.
#[pyfunction]
#[pyo3(signature = (x, m, base = 10000.0))]
fn rope(x: Vec<f64>, m: usize, base: f64) -> PyResult<Vec<f64>> {
    let th = rope_thetas(x.len(), base).map_err(err)?;
    let n = x.len();
    Ok(rope_rotate(&Tensor::new(x, &[n]).map_err(err)?, m, &th).map_err(err)?.to_vec())
}

#[pymodule(name = "jambatalk")]
pub fn jambatalk_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_function(wrap_pyfunction!(benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_suite, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(discretize, m)?)?;
    m.add_function(wrap_pyfunction!(rope, m)?)?;
    Ok(())
}
