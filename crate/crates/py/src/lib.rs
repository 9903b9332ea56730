//! Python bindings: configuration, the pipeline commands, checkpoints and
//! the standalone metrics.

use std::path::PathBuf;

use fairlong::evaluation::EvalSetting;
use fairlong::io::{self, Checkpoint, TrainPhase};
use fairlong::metrics::{self, Bandwidth, SinkhornConfig, WeightedSample};
use fairlong::models::{MlpClassifier, Parameterized};
use fairlong::Error;
use pyo3::exceptions::{PyFileNotFoundError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(err: Error) -> PyErr {
    let msg = err.to_string();
    match err {
        Error::Prerequisite(_) => PyFileNotFoundError::new_err(msg),
        Error::Io { .. } => PyOSError::new_err(msg),
        Error::NonFinite { .. } | Error::Diverged { .. } => PyRuntimeError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn json_to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Experiment configuration; every key has a default.
#[pyclass(name = "ExperimentConfig", module = "fairlong")]
struct PyConfig {
    inner: io::ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml = ""))]
    fn new(toml: &str) -> PyResult<Self> {
        Ok(PyConfig {
            inner: io::ExperimentConfig::from_toml_str(toml).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyConfig {
            inner: io::ExperimentConfig::load(path).map_err(to_py)?,
        })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().map_err(to_py)
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn __repr__(&self) -> String {
        format!(
            "ExperimentConfig(seed={}, fingerprint={})",
            self.inner.seed,
            &self.inner.fingerprint()[..12]
        )
    }
}

/// A decision classifier loaded from a checkpoint.
#[pyclass(name = "Classifier", module = "fairlong")]
struct PyClassifier {
    inner: MlpClassifier,
}

#[pymethods]
impl PyClassifier {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(path).map_err(to_py)?;
        let inner = match ck.kind {
            io::CheckpointKind::GroundTruth => ck.to_ground_truth().map_err(to_py)?.classifier().clone(),
            _ => ck.to_classifier().map_err(to_py)?,
        };
        Ok(PyClassifier { inner })
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.feature_dim()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// `P(Y=1 | s, x)` per row; `x` is a list of feature rows.
    fn predict(&self, s: Vec<u8>, x: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let flat: Vec<f64> = x.concat();
        self.inner.predict_batch(&s, &flat).map_err(to_py)
    }

    fn demographic_parity(&self, s: Vec<u8>, x: Vec<Vec<f64>>) -> PyResult<f64> {
        metrics::demographic_parity(&self.inner, &s, &x.concat()).map_err(to_py)
    }

    fn equal_opportunity(&self, s: Vec<u8>, x: Vec<Vec<f64>>, y: Vec<u8>) -> PyResult<f64> {
        metrics::equal_opportunity(&self.inner, &s, &x.concat(), &y).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "Classifier(feature_dim={}, params={})",
            self.inner.feature_dim(),
            self.inner.param_count()
        )
    }
}

/// Writes the split datasets and the ground-truth checkpoint under `out`.
#[pyfunction]
fn generate(config: &PyConfig, out: PathBuf) -> PyResult<Vec<PathBuf>> {
    io::cmd_generate(&config.inner, &out).map_err(to_py)
}

/// Trains one phase; returns the training log as a list of dicts.
#[pyfunction]
fn train<'py>(py: Python<'py>, config: &PyConfig, phase: &str, out: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let phase: TrainPhase = phase.parse().map_err(to_py)?;
    let summary = py.detach(|| io::cmd_train(&config.inner, phase, &out)).map_err(to_py)?;
    json_to_py(py, &summary.history)
}

/// Evaluates checkpoints under setting 1 or 2; returns the comparison table.
#[pyfunction]
#[pyo3(signature = (config, out, setting = 1, models = Vec::new()))]
fn evaluate<'py>(
    py: Python<'py>,
    config: &PyConfig,
    out: PathBuf,
    setting: u8,
    models: Vec<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let setting = match setting {
        1 => EvalSetting::setting1(),
        2 => EvalSetting::setting2(),
        other => return Err(PyValueError::new_err(format!("setting must be 1 or 2, got {other}"))),
    };
    let (_, table) = py
        .detach(|| io::cmd_evaluate(&config.inner, &out, &setting, &models))
        .map_err(to_py)?;
    json_to_py(py, &table)
}

/// Markdown summary of all comparison tables under `out`.
#[pyfunction]
fn report(out: PathBuf) -> PyResult<String> {
    io::cmd_report(&out).map_err(to_py)
}

type CohortRows = (Vec<u8>, Vec<Vec<f64>>, Vec<u8>);

/// Synthetic first-step cohort: `(s, x_rows, y)`.
#[pyfunction]
#[pyo3(signature = (n, d, cluster_separation = 2.0, seed = 0))]
fn initial_cohort(n: usize, d: usize, cluster_separation: f64, seed: u64) -> PyResult<CohortRows> {
    let c = fairlong::simulator::generate_initial_cohort(n, d, cluster_separation, seed).map_err(to_py)?;
    let rows = c.x1().chunks(d).map(<[f64]>::to_vec).collect();
    Ok((c.s().to_vec(), rows, c.y1().unwrap_or_default().to_vec()))
}

fn sample(rows: Vec<Vec<f64>>) -> PyResult<WeightedSample> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    WeightedSample::uniform(rows.concat(), d).map_err(to_py)
}

/// Debiased Sinkhorn divergence between two point clouds; returns `(value, converged)`.
#[pyfunction]
#[pyo3(signature = (a, b, reg = 0.05, relative = true))]
fn sinkhorn_divergence(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, reg: f64, relative: bool) -> PyResult<(f64, bool)> {
    let cfg = SinkhornConfig {
        reg,
        relative_reg: relative,
        ..SinkhornConfig::default()
    };
    let out = metrics::sinkhorn_divergence(&sample(a)?, &sample(b)?, &cfg).map_err(to_py)?;
    Ok((out.value, out.converged))
}

/// Exact 1-Wasserstein distance between equal-size 1-D samples.
#[pyfunction]
fn wasserstein1_1d(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    metrics::wasserstein1_exact_1d(&a, &b).map_err(to_py)
}

/// Squared MMD with a Gaussian kernel; `bandwidth=None` uses the median heuristic.
#[pyfunction]
#[pyo3(signature = (a, b, bandwidth = None))]
fn mmd(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, bandwidth: Option<f64>) -> PyResult<f64> {
    let (sa, sb) = (sample(a)?, sample(b)?);
    let bw = bandwidth.map_or(Bandwidth::Median, Bandwidth::Fixed);
    metrics::mmd_rbf(sa.points(), sb.points(), sa.d(), bw).map_err(to_py)
}

#[pymodule]
#[pyo3(name = "fairlong")]
fn fairlong_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyClassifier>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(initial_cohort, m)?)?;
    m.add_function(wrap_pyfunction!(sinkhorn_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(wasserstein1_1d, m)?)?;
    m.add_function(wrap_pyfunction!(mmd, m)?)?;
    Ok(())
}
