//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fedthresh::config::ScenarioConfig;
use fedthresh::error_stats::{self, ErrorSummary, FormulaMode, GlobalSummary, OverlapRegion};
use fedthresh::metrics::{self, Confusion};
use fedthresh::ndarray::Array2;
use fedthresh::nn::{self, ModelParams, Optimizer, TrainConfig};
use fedthresh::thresholds::{self, MethodParams, MethodTag};
use fedthresh::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) | Error::Parse { .. } => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err("rows have unequal lengths"));
    }
    let nrows = rows.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((nrows, ncols), flat).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

fn formula_mode(name: &str) -> PyResult<FormulaMode> {
    match name {
        "exact_pooled" => Ok(FormulaMode::ExactPooled),
        "paper" => Ok(FormulaMode::Paper),
        other => Err(PyValueError::new_err(format!(
            "unknown formula mode `{other}`; expected exact_pooled or paper"
        ))),
    }
}

/// Dense autoencoder with ReLU hidden layers and a linear output.
#[pyclass(name = "Model", module = "fedthresh_py", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: ModelParams,
}

#[pymethods]
impl PyModel {
    /// Glorot-initialised model; `hidden_dims` defaults to the halving encoder.
    #[new]
    #[pyo3(signature = (input_dim, hidden_dims=None, seed=0))]
    fn new(input_dim: usize, hidden_dims: Option<Vec<usize>>, seed: u64) -> PyResult<Self> {
        let hidden = hidden_dims.unwrap_or_else(|| nn::default_hidden_dims(input_dim));
        let inner = ModelParams::init(input_dim, &hidden, seed).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.inner.dims()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn forward(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = matrix(x)?;
        Ok(rows(&self.inner.forward(x.view()).map_err(to_py)?))
    }

    /// Per-sample reconstruction MSE.
    fn mse(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let x = matrix(x)?;
        self.inner.mse_per_sample(x.view()).map_err(to_py)
    }

    /// Trains in place and returns the per-epoch losses.
    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (x, epochs=1, learning_rate=0.01, batch_size=32, seed=0, adam=false))]
    fn train(
        &mut self,
        py: Python<'_>,
        x: Vec<Vec<f64>>,
        epochs: usize,
        learning_rate: f64,
        batch_size: usize,
        seed: u64,
        adam: bool,
    ) -> PyResult<Vec<f64>> {
        let x = matrix(x)?;
        let cfg = TrainConfig {
            local_epochs: epochs,
            learning_rate,
            batch_size,
            seed,
            optimizer: if adam { Optimizer::adam() } else { Optimizer::Sgd },
        };
        let model = &self.inner;
        let out = py.detach(|| nn::train_local(model, x.view(), &cfg)).map_err(to_py)?;
        self.inner = out.model;
        Ok(out.epoch_losses)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: ModelParams::load(&path).map_err(to_py)? })
    }

    fn __repr__(&self) -> String {
        format!("Model(dims={:?})", self.inner.dims())
    }
}

/// Moments of one client's errors for one class.
#[pyclass(name = "Summary", module = "fedthresh_py", get_all, from_py_object)]
#[derive(Clone, Copy)]
struct PySummary {
    mean: f64,
    variance: f64,
    skewness: f64,
    kurtosis: f64,
    count: usize,
}

impl From<ErrorSummary> for PySummary {
    fn from(s: ErrorSummary) -> Self {
        Self { mean: s.mean, variance: s.variance, skewness: s.skewness, kurtosis: s.kurtosis, count: s.count }
    }
}

impl PySummary {
    fn inner(&self) -> ErrorSummary {
        ErrorSummary::from_moments(self.mean, self.variance, self.skewness, self.kurtosis, self.count)
    }
}

#[pymethods]
impl PySummary {
    #[new]
    fn new(mean: f64, variance: f64, skewness: f64, kurtosis: f64, count: usize) -> Self {
        Self { mean, variance, skewness, kurtosis, count }
    }

    fn __repr__(&self) -> String {
        format!(
            "Summary(mean={}, variance={}, skewness={}, kurtosis={}, count={})",
            self.mean, self.variance, self.skewness, self.kurtosis, self.count
        )
    }
}

/// Pooled moments across clients.
#[pyclass(name = "GlobalSummary", module = "fedthresh_py", skip_from_py_object)]
#[derive(Clone)]
struct PyGlobalSummary {
    inner: GlobalSummary,
}

#[pymethods]
impl PyGlobalSummary {
    #[getter]
    fn mean(&self) -> f64 {
        self.inner.mean
    }
    #[getter]
    fn variance(&self) -> f64 {
        self.inner.variance
    }
    #[getter]
    fn skewness(&self) -> f64 {
        self.inner.skewness
    }
    #[getter]
    fn kurtosis(&self) -> f64 {
        self.inner.kurtosis
    }
    #[getter]
    fn count(&self) -> usize {
        self.inner.count
    }
    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.inner.warnings.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "GlobalSummary(mean={}, variance={}, count={})",
            self.inner.mean, self.inner.variance, self.inner.count
        )
    }
}

#[pyfunction]
fn summarize(errors: Vec<f64>) -> PyResult<PySummary> {
    Ok(error_stats::summarize(&errors).map_err(to_py)?.into())
}

#[pyfunction]
#[pyo3(signature = (summaries, mode="exact_pooled"))]
fn aggregate(summaries: Vec<PySummary>, mode: &str) -> PyResult<PyGlobalSummary> {
    let parts: Vec<ErrorSummary> = summaries.iter().map(PySummary::inner).collect();
    let inner = error_stats::aggregate(&parts, formula_mode(mode)?).map_err(to_py)?;
    Ok(PyGlobalSummary { inner })
}

/// `(lower, upper, degenerate)` of the interval where the classes meet.
#[pyfunction]
#[pyo3(signature = (normal, anomaly, refine=false))]
fn overlap_region(normal: &PyGlobalSummary, anomaly: &PyGlobalSummary, refine: bool) -> (f64, f64, bool) {
    let r = error_stats::overlap_region(&normal.inner, &anomaly.inner, refine);
    (r.lower, r.upper, r.degenerate)
}

#[pyfunction]
fn generate_candidates(lower: f64, upper: f64, n: usize) -> PyResult<Vec<f64>> {
    let region = OverlapRegion { lower, upper, degenerate: false };
    error_stats::generate_candidates(&region, n).map_err(to_py)
}

#[pyfunction]
fn f1_curve(errors: Vec<f64>, labels: Vec<u8>, candidates: Vec<f64>) -> PyResult<Vec<f64>> {
    if errors.len() != labels.len() {
        return Err(PyValueError::new_err("errors and labels differ in length"));
    }
    Ok(metrics::f1_curve(&errors, &labels, &candidates))
}

#[pyfunction]
fn f1_score(errors: Vec<f64>, labels: Vec<u8>, threshold: f64) -> PyResult<f64> {
    if errors.len() != labels.len() {
        return Err(PyValueError::new_err("errors and labels differ in length"));
    }
    Ok(Confusion::at_threshold(&errors, &labels, threshold).f1())
}

#[pyfunction]
fn classify(errors: Vec<f64>, threshold: f64) -> Vec<i64> {
    // plain ints rather than `bytes`
    thresholds::classify(&errors, threshold).into_iter().map(i64::from).collect()
}

/// Threshold from one client's validation errors with a local method.
/// `local_minmax` needs `labels`; the others read normal errors only.
#[pyfunction]
#[pyo3(signature = (method, errors, labels=None, candidates=1000, percentile=99.0, kqe_q=0.99, pot_u_quantile=0.98, pot_risk=1e-3))]
#[allow(clippy::too_many_arguments)]
fn local_threshold(
    method: &str,
    errors: Vec<f64>,
    labels: Option<Vec<u8>>,
    candidates: usize,
    percentile: f64,
    kqe_q: f64,
    pot_u_quantile: f64,
    pot_risk: f64,
) -> PyResult<f64> {
    let tag: MethodTag = method.parse().map_err(to_py)?;
    let params = MethodParams { candidates, percentile, kqe_q, pot_u_quantile, pot_risk, ..MethodParams::default() };
    let r = match tag {
        MethodTag::LocalMinmax => {
            let labels = labels.ok_or_else(|| PyValueError::new_err("local_minmax needs labels"))?;
            thresholds::local_minmax(&errors, &labels, params.candidates)
        }
        MethodTag::Kqe => thresholds::kqe(&errors, params.kqe_q, None),
        MethodTag::Pot => thresholds::pot(&errors, params.pot_u_quantile, params.pot_risk),
        other if other.is_federated() => {
            return Err(PyValueError::new_err(format!("{other} is a federated method")));
        }
        other => thresholds::local_simple(other, &errors, &params),
    };
    r.map_err(to_py)
}

#[pyfunction]
fn fed_mse_std(summaries: Vec<PySummary>) -> PyResult<f64> {
    let parts: Vec<ErrorSummary> = summaries.iter().map(PySummary::inner).collect();
    thresholds::fed_mse_std(&parts).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (local_thresholds, z_cut=1.5))]
fn fed_filtered(local_thresholds: Vec<f64>, z_cut: f64) -> PyResult<f64> {
    thresholds::fed_filtered(&local_thresholds, z_cut).map_err(to_py)
}

/// Runs a whole scenario from TOML text and returns the result rows as dicts.
#[pyfunction]
fn run_scenario<'py>(py: Python<'py>, config_toml: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = ScenarioConfig::from_toml_str(config_toml).map_err(to_py)?;
    let out = py.detach(|| fedthresh::harness::run_scenario(&cfg)).map_err(to_py)?;
    out.rows
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("scenario_id", &r.scenario_id)?;
            d.set_item("dataset", &r.dataset)?;
            d.set_item("scheme", &r.scheme)?;
            d.set_item("num_clients", r.num_clients)?;
            d.set_item("corrupt_clients", r.corrupt_clients)?;
            d.set_item("method", r.method.as_str())?;
            d.set_item("client_id", &r.client_id)?;
            d.set_item("f1", r.f1)?;
            d.set_item("threshold", r.threshold)?;
            d.set_item("wall_time_ms", r.wall_time_ms)?;
            d.set_item("config_hash", &r.config_hash)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn fedthresh_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PySummary>()?;
    m.add_class::<PyGlobalSummary>()?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(overlap_region, m)?)?;
    m.add_function(wrap_pyfunction!(generate_candidates, m)?)?;
    m.add_function(wrap_pyfunction!(f1_curve, m)?)?;
    m.add_function(wrap_pyfunction!(f1_score, m)?)?;
    m.add_function(wrap_pyfunction!(classify, m)?)?;
    m.add_function(wrap_pyfunction!(local_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(fed_mse_std, m)?)?;
    m.add_function(wrap_pyfunction!(fed_filtered, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add("METHODS", MethodTag::ALL.iter().map(|t| t.as_str()).collect::<Vec<_>>())?;
    Ok(())
}
