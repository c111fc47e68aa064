//! Python bindings: parameter vectors, the three update rules, configs,
//! in-process runs, experiment studies and the wire codec.

use std::collections::BTreeMap;
use std::path::PathBuf;

use fedmesh::algorithms::{self, MergeMode, SiteUpdate};
use fedmesh::experiment;
use fedmesh::orchestration::{self, Algorithm, DropoutMode, FederationConfig};
use fedmesh::params;
use fedmesh::stats;
use fedmesh::wire::{self, WireMessage};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A dense vector of model parameters.
#[pyclass(name = "ParameterVector", module = "fedmesh", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyParameterVector {
    inner: params::ParameterVector,
}

#[pymethods]
impl PyParameterVector {
    #[new]
    fn new(values: Vec<f64>) -> PyResult<Self> {
        let inner = params::ParameterVector::checked(values).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn zeros(dim: usize) -> Self {
        Self { inner: params::ParameterVector::zeros(dim) }
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn to_list(&self) -> Vec<f64> {
        self.inner.as_slice().to_vec()
    }

    /// Length-prefixed little-endian encoding.
    fn encode<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &params::encode_params(&self.inner))
    }

    #[staticmethod]
    fn decode(data: &[u8]) -> PyResult<Self> {
        let inner = params::decode_params_checked(data).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.dim()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner.bit_eq(&other.inner)
    }

    fn __repr__(&self) -> String {
        format!("ParameterVector(dim={})", self.inner.dim())
    }
}

fn merge_mode(mode: &str) -> PyResult<MergeMode> {
    match mode {
        "paper" => Ok(MergeMode::Paper),
        "inverse" => Ok(MergeMode::Inverse),
        other => Err(PyValueError::new_err(format!("unknown merge mode `{other}`"))),
    }
}

/// Case-count weighted average of `(site_id, case_count, params)` updates.
#[pyfunction]
fn fedavg_aggregate(updates: Vec<(u64, u64, Vec<f64>)>) -> PyResult<Vec<f64>> {
    let updates: Vec<SiteUpdate> = updates
        .into_iter()
        .map(|(site_id, case_count, p)| SiteUpdate { site_id, case_count, params: params::ParameterVector::new(p) })
        .collect();
    Ok(algorithms::fedavg_aggregate(&updates).map_err(value_err)?.into_vec())
}

/// Proximal objective: returns `(loss, gradient)`.
#[pyfunction]
fn fedprox_objective(
    base_loss: f64,
    base_grad: Vec<f64>,
    w_local: Vec<f64>,
    w_global: Vec<f64>,
    mu: f64,
) -> PyResult<(f64, Vec<f64>)> {
    let (l, g) = algorithms::fedprox_objective(
        base_loss,
        &params::ParameterVector::new(base_grad),
        &params::ParameterVector::new(w_local),
        &params::ParameterVector::new(w_global),
        mu,
    )
    .map_err(value_err)?;
    Ok((l, g.into_vec()))
}

#[pyfunction]
#[pyo3(signature = (w_r, w_s, v_r, v_s, mode = "paper"))]
fn gcml_merge(w_r: Vec<f64>, w_s: Vec<f64>, v_r: f64, v_s: f64, mode: &str) -> PyResult<Vec<f64>> {
    let out = algorithms::gcml_merge(
        &params::ParameterVector::new(w_r),
        &params::ParameterVector::new(w_s),
        v_r,
        v_s,
        merge_mode(mode)?,
    )
    .map_err(value_err)?;
    Ok(out.into_vec())
}

/// One-way ANOVA: returns `(F, p)`.
#[pyfunction]
fn anova_one_way(groups: Vec<Vec<f64>>) -> PyResult<(f64, f64)> {
    let a = stats::anova_one_way(&groups).map_err(value_err)?;
    Ok((a.f, a.p))
}

#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    stats::spearman(&x, &y).map_err(value_err)
}

/// A validated federation configuration.
#[pyclass(name = "FederationConfig", module = "fedmesh", skip_from_py_object)]
#[derive(Clone)]
struct PyFederationConfig {
    inner: FederationConfig,
}

#[pymethods]
impl PyFederationConfig {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = orchestration::load_config(&path).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let inner = orchestration::config::parse_config(text, std::path::Path::new("<string>")).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn algorithm(&self) -> &'static str {
        self.inner.algorithm.as_str()
    }

    #[setter]
    fn set_algorithm(&mut self, name: &str) -> PyResult<()> {
        let alg = match name {
            "fedavg" => Algorithm::Fedavg,
            "fedprox" => Algorithm::Fedprox,
            "gcml" => Algorithm::Gcml,
            "individual" => Algorithm::Individual,
            "pooled" => Algorithm::Pooled,
            other => return Err(PyValueError::new_err(format!("unknown algorithm `{other}`"))),
        };
        self.inner.algorithm = alg;
        Ok(())
    }

    #[getter]
    fn rounds(&self) -> u64 {
        self.inner.rounds
    }

    #[setter]
    fn set_rounds(&mut self, rounds: u64) {
        self.inner.rounds = rounds;
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner = self.inner.clone().with_seed(seed);
    }

    #[getter]
    fn site_ids(&self) -> Vec<u64> {
        self.inner.site_ids()
    }

    fn __repr__(&self) -> String {
        format!(
            "FederationConfig(algorithm={}, rounds={}, sites={}, seed={})",
            self.inner.algorithm.as_str(),
            self.inner.rounds,
            self.inner.sites.len(),
            self.inner.seed
        )
    }
}

/// Result of a run.
#[pyclass(name = "RunOutcome", module = "fedmesh", frozen)]
struct PyRunOutcome {
    #[pyo3(get)]
    final_test_loss: f64,
    #[pyo3(get)]
    final_test_accuracy: Option<f64>,
    #[pyo3(get)]
    global_model: Option<Vec<f64>>,
    #[pyo3(get)]
    site_models: BTreeMap<u64, Vec<f64>>,
    #[pyo3(get)]
    server_inbox: Vec<u8>,
    history: Vec<orchestration::metrics::RoundMetrics>,
}

#[pymethods]
impl PyRunOutcome {
    /// Per-round metrics rows as dictionaries.
    fn history<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.history
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("round", r.round)?;
                d.set_item("site_id", r.site_id)?;
                d.set_item("role", &r.role)?;
                d.set_item("train_loss", r.train_loss)?;
                d.set_item("val_loss", r.val_loss)?;
                d.set_item("test_loss", r.test_loss)?;
                d.set_item("test_accuracy", r.test_accuracy)?;
                d.set_item("bytes_sent", r.bytes_sent)?;
                d.set_item("bytes_received", r.bytes_received)?;
                d.set_item("wall_ms", r.wall_ms)?;
                Ok(d)
            })
            .collect()
    }

    fn __repr__(&self) -> String {
        format!("RunOutcome(final_test_loss={:.6}, final_test_accuracy={:?})", self.final_test_loss, self.final_test_accuracy)
    }
}

impl From<orchestration::RunOutcome> for PyRunOutcome {
    fn from(o: orchestration::RunOutcome) -> Self {
        Self {
            final_test_loss: o.final_test_loss,
            final_test_accuracy: o.final_test_accuracy,
            global_model: o.global_model.map(|g| g.into_vec()),
            site_models: o.site_models.into_iter().map(|(k, v)| (k, v.into_vec())).collect(),
            server_inbox: o.server_inbox,
            history: o.history,
        }
    }
}

fn run_err(e: orchestration::OrchestrationError) -> PyErr {
    if e.is_config() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

/// Runs a federation in process.
#[pyfunction]
fn run_in_process(py: Python<'_>, config: &PyFederationConfig) -> PyResult<PyRunOutcome> {
    let c = config.inner.clone();
    let out = py.detach(move || orchestration::run_in_process(&c)).map_err(run_err)?;
    Ok(out.into())
}

/// Runs a federation over loopback sockets, one thread per site.
#[pyfunction]
fn run_socket_threads(py: Python<'_>, config: &PyFederationConfig) -> PyResult<PyRunOutcome> {
    let c = config.inner.clone();
    let out = py.detach(move || orchestration::socket::run_socket_threads(&c)).map_err(run_err)?;
    Ok(out.into())
}

/// Dropout robustness study: returns `(rows, F, p)` with one
/// `(label, mean_accuracy, std_accuracy)` row per scenario.
#[pyfunction]
#[pyo3(signature = (config, reps = 10, base_seed = 0, output_dir = None))]
fn dropout_study(
    py: Python<'_>,
    config: &PyFederationConfig,
    reps: usize,
    base_seed: u64,
    output_dir: Option<PathBuf>,
) -> PyResult<(Vec<(String, f64, f64)>, f64, f64)> {
    let c = config.inner.clone();
    let report = py
        .detach(move || {
            if let Some(d) = &output_dir {
                std::fs::create_dir_all(d)?;
            }
            experiment::dropout_robustness_study(
                &c,
                &[1, 2],
                &[DropoutMode::Disconnect, DropoutMode::Shutdown],
                reps,
                base_seed,
                output_dir.as_deref(),
            )
            .map_err(|e| std::io::Error::other(e.to_string()))
        })
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let rows = report.scenarios.iter().map(|s| (s.label.clone(), s.mean_accuracy, s.std_accuracy)).collect();
    Ok((rows, report.anova.f, report.anova.p))
}

/// Encodes a GLOBAL_MODEL frame.
#[pyfunction]
fn encode_global_model<'py>(py: Python<'py>, round: u64, params: Vec<f64>) -> PyResult<Bound<'py, PyBytes>> {
    let m = WireMessage::GlobalModel { round, params: params::ParameterVector::new(params) };
    Ok(PyBytes::new(py, &wire::encode_message(&m).map_err(value_err)?))
}

/// Decodes one frame into `(kind, type_code)`; raises on malformed input.
#[pyfunction]
fn decode_frame(data: &[u8]) -> PyResult<(&'static str, u8)> {
    let m = wire::decode_message(data).map_err(value_err)?;
    Ok((m.kind(), m.type_code()))
}

#[pyfunction]
fn write_checkpoint(path: PathBuf, values: Vec<f64>) -> PyResult<()> {
    params::write_checkpoint(&path, &params::ParameterVector::new(values)).map_err(|e| PyIOError::new_err(e.to_string()))
}

#[pyfunction]
fn read_checkpoint(path: PathBuf) -> PyResult<Vec<f64>> {
    params::read_checkpoint(&path)
        .map(|v| v.into_vec())
        .map_err(|e| PyIOError::new_err(e.to_string()))
}

#[pymodule]
#[pyo3(name = "fedmesh")]
fn fedmesh_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyParameterVector>()?;
    m.add_class::<PyFederationConfig>()?;
    m.add_class::<PyRunOutcome>()?;
    m.add_function(wrap_pyfunction!(fedavg_aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(fedprox_objective, m)?)?;
    m.add_function(wrap_pyfunction!(gcml_merge, m)?)?;
    m.add_function(wrap_pyfunction!(anova_one_way, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(run_in_process, m)?)?;
    m.add_function(wrap_pyfunction!(run_socket_threads, m)?)?;
    m.add_function(wrap_pyfunction!(dropout_study, m)?)?;
    m.add_function(wrap_pyfunction!(encode_global_model, m)?)?;
    m.add_function(wrap_pyfunction!(decode_frame, m)?)?;
    m.add_function(wrap_pyfunction!(write_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(read_checkpoint, m)?)?;
    Ok(())
}
