//! Python bindings: suite configuration, data generation, benchmark runs,
//! CKA, continual metrics and checkpoint inspection.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use hide_forge::bench::{self, SuiteConfig};
use hide_forge::checkpoint::TensorFile;
use hide_forge::cka::{self, ActivationMatrix};
use hide_forge::continual::{self, AccuracyMatrix, Strategy};
use hide_forge::numerics::Matrix;
use hide_forge::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Matrix> {
    Matrix::from_rows(rows).map_err(py_err)
}

/// Benchmark configuration; defaults match the command-line tool.
#[pyclass(name = "SuiteConfig", module = "hide_forge_py", skip_from_py_object)]
#[derive(Clone)]
struct PySuiteConfig {
    inner: SuiteConfig,
}

#[pymethods]
impl PySuiteConfig {
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(text) => SuiteConfig::from_toml(text).map_err(py_err)?,
            None => SuiteConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: SuiteConfig::load(&path).map_err(py_err)? })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.suite.seed
    }

    fn with_seed(&self, seed: u64) -> Self {
        Self { inner: self.inner.clone().with_seed(seed) }
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn __repr__(&self) -> String {
        format!("SuiteConfig(seed={}, hash={})", self.inner.suite.seed, &self.inner.hash()[..12])
    }
}

/// Read-only view of a checkpoint container.
#[pyclass(name = "Checkpoint", module = "hide_forge_py")]
struct PyCheckpoint {
    inner: TensorFile,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: TensorFile::read(&path).map_err(py_err)? })
    }

    #[getter]
    fn kind(&self) -> Option<String> {
        self.inner.kind().map(str::to_string)
    }

    fn names(&self) -> Vec<String> {
        self.inner.tensors.iter().map(|(n, _)| n.clone()).collect()
    }

    fn meta(&self) -> std::collections::BTreeMap<String, String> {
        self.inner.meta.clone()
    }

    /// A tensor as a list of rows.
    fn tensor(&self, name: &str) -> PyResult<Vec<Vec<f64>>> {
        let m = self.inner.get(name).map_err(py_err)?;
        Ok((0..m.rows()).map(|r| m.row(r).to_vec()).collect())
    }
}

/// Generates the synthetic suite into `out_dir`; returns its data hash.
#[pyfunction]
fn generate_suite(config: &PySuiteConfig, out_dir: PathBuf) -> PyResult<String> {
    let suite = bench::generate_suite(&config.inner).map_err(py_err)?;
    suite.write(&out_dir, config.inner.suite.seed).map_err(py_err)?;
    Ok(suite.data_hash)
}

/// Trains and evaluates every configured strategy; reports are also written
/// under `run_dir`. Returns one dict per (strategy, sweep point).
#[pyfunction]
fn run_suite<'py>(
    py: Python<'py>,
    config: &PySuiteConfig,
    data_dir: PathBuf,
    run_dir: PathBuf,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = &config.inner;
    let suite = bench::load_suite(&data_dir, cfg).map_err(py_err)?;
    let outcome = py.detach(|| bench::run_suite(cfg, &suite, &run_dir)).map_err(py_err)?;
    outcome
        .reports
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("strategy", r.strategy.as_str())?;
            d.set_item("sweep", &r.sweep)?;
            d.set_item("seed", r.seed)?;
            d.set_item("tasks", &r.tasks)?;
            d.set_item("accuracy_matrix", r.accuracy_matrix.rows().to_vec())?;
            d.set_item("last", &r.metrics.last)?;
            d.set_item("last_mean", r.metrics.last_mean)?;
            d.set_item("avg", &r.metrics.avg)?;
            d.set_item("avg_mean", r.metrics.avg_mean)?;
            Ok(d)
        })
        .collect()
}

/// Linear CKA between two activation matrices with matching row counts.
#[pyfunction]
fn linear_cka(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<f64> {
    let x = ActivationMatrix::new(matrix(&x)?, 0, "x").map_err(py_err)?;
    let y = ActivationMatrix::new(matrix(&y)?, 0, "y").map_err(py_err)?;
    cka::linear_cka(&x, &y).map_err(py_err)
}

/// Last and Avg from a lower-triangular accuracy matrix.
#[pyfunction]
fn continual_metrics<'py>(py: Python<'py>, rows: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
    let matrix = AccuracyMatrix::from_rows(rows).map_err(py_err)?;
    let m = continual::metrics(&matrix).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("last", m.last)?;
    d.set_item("last_mean", m.last_mean)?;
    d.set_item("avg", m.avg)?;
    d.set_item("avg_mean", m.avg_mean)?;
    Ok(d)
}

/// Names accepted wherever a strategy is expected.
#[pyfunction]
fn strategies() -> Vec<&'static str> {
    Strategy::ALL.iter().map(|s| s.as_str()).collect()
}

#[pymodule]
fn hide_forge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySuiteConfig>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(generate_suite, m)?)?;
    m.add_function(wrap_pyfunction!(run_suite, m)?)?;
    m.add_function(wrap_pyfunction!(linear_cka, m)?)?;
    m.add_function(wrap_pyfunction!(continual_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(strategies, m)?)?;
    Ok(())
}
