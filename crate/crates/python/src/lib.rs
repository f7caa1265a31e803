use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use edgepop_core::checkpoint::Checkpoint;
use edgepop_core::config::{Precision, TrainConfig};
use edgepop_core::data::Dataset;
use edgepop_core::popup;
use edgepop_core::train::{load_datasets, MetricsRow, TrainState};
use edgepop_core::verify::{self, Suite};
use edgepop_core::{Error, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::Format(_) | Error::Dimension(_) | Error::Parameter(_) | Error::Data(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Top-k mask of a flat score vector: `True` for the kept edges.
#[pyfunction]
fn get_subnet(scores: Vec<f64>, k: f64) -> PyResult<Vec<bool>> {
    let n = scores.len();
    let t = Tensor::new(vec![n], scores).map_err(py_err)?;
    Ok(popup::get_subnet(&t, k).map_err(py_err)?.bits().to_vec())
}

/// Number of edges kept out of `n` at keep fraction `k`.
#[pyfunction]
fn keep_count(n: usize, k: f64) -> usize {
    popup::keep_count(n, k)
}

/// Runs a check suite and returns `(name, passed, detail)` per check.
#[pyfunction]
#[pyo3(signature = (suite, seed=0))]
fn run_verify(py: Python<'_>, suite: &str, seed: u64) -> PyResult<Vec<(String, bool, String)>> {
    let suite: Suite = suite.parse().map_err(py_err)?;
    let report = py.allow_threads(|| verify::run_suite(suite, seed)).map_err(py_err)?;
    Ok(report.checks.into_iter().map(|c| (c.name, c.passed, c.detail)).collect())
}

/// Validated training configuration.
#[pyclass(name = "Config", frozen)]
#[derive(Clone)]
struct PyConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyConfig {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(PyConfig {
            inner: TrainConfig::from_toml(text).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyConfig {
            inner: TrainConfig::load(&path).map_err(py_err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    /// Copy with another seed.
    fn with_seed(&self, seed: u64) -> Self {
        let mut inner = self.inner.clone();
        inner.seed = seed;
        PyConfig { inner }
    }

    #[getter]
    fn k(&self) -> f64 {
        self.inner.k
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.epochs
    }

    #[getter]
    fn algorithm(&self) -> &'static str {
        self.inner.algorithm.name()
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(algorithm={:?}, k={}, epochs={}, seed={})",
            self.inner.algorithm.name(),
            self.inner.k,
            self.inner.epochs,
            self.inner.seed
        )
    }
}

enum State {
    F32(TrainState<f32>),
    F64(TrainState<f64>),
}

macro_rules! with_state {
    ($s:expr, $st:ident => $body:expr) => {
        match $s {
            State::F32($st) => $body,
            State::F64($st) => $body,
        }
    };
}

fn row_dict<'py>(py: Python<'py>, r: &MetricsRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("epoch", r.epoch)?;
    d.set_item("train_loss", r.train_loss)?;
    d.set_item("train_acc", r.train_acc)?;
    d.set_item("test_loss", r.test_loss)?;
    d.set_item("test_acc", r.test_acc)?;
    d.set_item("lr", r.lr)?;
    d.set_item("swaps", r.swaps.clone())?;
    Ok(d)
}

/// A training run: datasets loaded, model initialized, stepped one epoch at a time.
#[pyclass(name = "Run", unsendable)]
struct PyRun {
    cfg: TrainConfig,
    train: Dataset,
    test: Dataset,
    state: State,
}

#[pymethods]
impl PyRun {
    #[new]
    fn new(config: &PyConfig) -> PyResult<Self> {
        let cfg = config.inner.clone();
        let (train, test) = load_datasets(&cfg).map_err(py_err)?;
        let shape = train.sample_shape().to_vec();
        let state = match cfg.precision {
            Precision::F32 => State::F32(TrainState::init(&cfg, &shape).map_err(py_err)?),
            Precision::F64 => State::F64(TrainState::init(&cfg, &shape).map_err(py_err)?),
        };
        Ok(PyRun { cfg, train, test, state })
    }

    /// Trains one epoch and returns its metrics.
    fn epoch<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let (cfg, train, test) = (&self.cfg, &self.train, &self.test);
        let row = with_state!(&mut self.state, s => s.run_epoch(cfg, train, test).cloned()).map_err(py_err)?;
        row_dict(py, &row)
    }

    /// Trains the remaining epochs and returns every metrics row.
    fn train<'py>(&mut self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        while self.epochs_done() < self.cfg.epochs {
            self.epoch(py)?;
        }
        self.metrics(py)
    }

    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        with_state!(&self.state, s => s.metrics.rows.iter().map(|r| row_dict(py, r)).collect())
    }

    #[getter]
    fn epochs_done(&self) -> usize {
        with_state!(&self.state, s => s.epoch)
    }

    /// Current per-layer masks, flattened.
    fn masks(&self) -> PyResult<Vec<Vec<bool>>> {
        let masks = with_state!(&self.state, s => s.model.masks()).map_err(py_err)?;
        Ok(masks.into_iter().map(|m| m.bits().to_vec()).collect())
    }

    /// SHA-256 of each masked layer's weights, hex encoded.
    fn weight_hashes(&self) -> Vec<String> {
        let hashes = with_state!(&self.state, s => s.model.weight_hashes());
        hashes
            .iter()
            .map(|h| h.iter().map(|b| format!("{b:02x}")).collect())
            .collect()
    }

    /// Edges currently selected, out of all masked weights.
    fn edges(&self) -> PyResult<(usize, usize)> {
        with_state!(&self.state, s => Ok((s.model.subnet_size().map_err(py_err)?, s.model.total_weights())))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let ck = with_state!(&self.state, s => Checkpoint::capture(&self.cfg, s)).map_err(py_err)?;
        ck.save(&path).map_err(py_err)
    }
}

/// Reads a checkpoint's metadata: config TOML, epoch and metrics rows.
#[pyfunction]
fn load_checkpoint<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let ck = Checkpoint::load(&path).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("config", ck.meta.config.to_toml())?;
    d.set_item("config_hash", &ck.meta.config_hash)?;
    d.set_item("epoch", ck.meta.epoch)?;
    d.set_item("seed", ck.meta.seed)?;
    let rows = ck.meta.metrics.iter().map(|r| row_dict(py, r)).collect::<PyResult<Vec<_>>>()?;
    d.set_item("metrics", rows)?;
    Ok(d)
}

#[pymodule]
fn edgepop(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyRun>()?;
    m.add_function(wrap_pyfunction!(get_subnet, m)?)?;
    m.add_function(wrap_pyfunction!(keep_count, m)?)?;
    m.add_function(wrap_pyfunction!(run_verify, m)?)?;
    m.add_function(wrap_pyfunction!(load_checkpoint, m)?)?;
    Ok(())
}
