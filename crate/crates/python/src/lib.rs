//! Python bindings. Structured results cross the boundary as JSON strings
//! or plain lists so the Python side needs no extra packages.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use fedss_core::config::RunConfig;
use fedss_core::device_model::{synth_population, SampleRange};
use fedss_core::metrics::{accuracy as cm_accuracy, f1_weighted as cm_f1_weighted};
use fedss_core::{
    self as core, ClientId, ClientProfile, ConfusionMatrix, Error, GlobalModelSpec, KneeCurve, PolicyConfig,
    PolicyKind, SynthSpec,
};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(format!("[{}] {e}", e.category())),
    }
}

#[pyclass(name = "Population", module = "fedss", frozen)]
struct PyPopulation {
    inner: core::Population,
}

#[pymethods]
impl PyPopulation {
    /// Sample `n` clients from the bundled device and bandwidth tables.
    #[staticmethod]
    #[pyo3(signature = (n, seed=0, model_size_bits=8e7, flops_per_sample=1e9, samples_min=100, samples_max=300))]
    fn fixture(
        n: usize,
        seed: u64,
        model_size_bits: f64,
        flops_per_sample: f64,
        samples_min: u64,
        samples_max: u64,
    ) -> PyResult<Self> {
        let model = GlobalModelSpec::new(model_size_bits, flops_per_sample).map_err(to_py)?;
        let samples = SampleRange {
            min: samples_min,
            max: samples_max,
        };
        let inner = core::Population::fixture(model, n, samples, seed).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Log-uniform synthetic population with default ranges.
    #[staticmethod]
    #[pyo3(signature = (n, seed=0, model_size_bits=8e7, flops_per_sample=1e9))]
    fn synth(n: usize, seed: u64, model_size_bits: f64, flops_per_sample: f64) -> PyResult<Self> {
        let model = GlobalModelSpec::new(model_size_bits, flops_per_sample).map_err(to_py)?;
        let inner = synth_population(&SynthSpec::default(), model, n, seed).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Build from `(id, uplink_bps, downlink_bps, flops_rate, num_samples)` rows.
    #[staticmethod]
    fn from_profiles(
        rows: Vec<(u32, f64, f64, f64, u64)>,
        model_size_bits: f64,
        flops_per_sample: f64,
    ) -> PyResult<Self> {
        let model = GlobalModelSpec::new(model_size_bits, flops_per_sample).map_err(to_py)?;
        let clients = rows
            .into_iter()
            .map(|(id, up, down, rate, n)| ClientProfile::new(ClientId(id), up, down, rate, n))
            .collect::<core::Result<Vec<_>>>()
            .map_err(to_py)?;
        let inner = core::Population::new(clients, model).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: core::Population::from_json(text).map_err(to_py)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    fn ids(&self) -> Vec<u32> {
        self.inner.clients().iter().map(|c| c.id.0).collect()
    }

    /// Estimated seconds per round, in id order.
    fn round_times(&self) -> Vec<f64> {
        self.inner.round_times()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Population(n={})", self.inner.len())
    }
}

#[pyclass(name = "ClusterSet", module = "fedss", frozen)]
struct PyClusterSet {
    inner: core::ClusterSet,
}

#[pymethods]
impl PyClusterSet {
    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    fn clusters(&self) -> Vec<Vec<u32>> {
        self.inner
            .clusters()
            .iter()
            .map(|c| c.iter().map(|id| id.0).collect())
            .collect()
    }

    fn centroids(&self) -> Vec<f64> {
        self.inner.centroids().to_vec()
    }

    fn sizes(&self) -> Vec<usize> {
        self.inner.sizes()
    }

    fn k_anonymity(&self) -> usize {
        core::clustering::k_anonymity(&self.inner)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("ClusterSet(k={}, sizes={:?})", self.inner.k(), self.inner.sizes())
    }
}

#[pyclass(name = "SimulationReport", module = "fedss", frozen)]
struct PySimulationReport {
    inner: core::SimulationReport,
}

#[pymethods]
impl PySimulationReport {
    #[getter]
    fn policy(&self) -> &'static str {
        self.inner.policy.as_str()
    }

    #[getter]
    fn total_time(&self) -> f64 {
        self.inner.total_time
    }

    #[getter]
    fn rounds(&self) -> usize {
        self.inner.rounds()
    }

    fn mean_round_time(&self) -> f64 {
        self.inner.mean_round_time()
    }

    fn durations(&self) -> Vec<f64> {
        self.inner.durations()
    }

    /// `{client id: times aggregated}`.
    fn aggregation_counts(&self) -> Vec<(u32, u64)> {
        self.inner
            .per_client_aggregation_counts
            .iter()
            .map(|(id, c)| (id.0, *c))
            .collect()
    }

    fn rounds_csv(&self) -> String {
        self.inner.rounds_csv()
    }

    fn cdf_csv(&self) -> String {
        self.inner.cdf_csv()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

#[pyfunction]
fn estimate_round_time(
    uplink_bps: f64,
    downlink_bps: f64,
    flops_rate: f64,
    num_samples: u64,
    model_size_bits: f64,
    flops_per_sample: f64,
) -> PyResult<f64> {
    let client = ClientProfile::new(ClientId(0), uplink_bps, downlink_bps, flops_rate, num_samples).map_err(to_py)?;
    let model = GlobalModelSpec::new(model_size_bits, flops_per_sample).map_err(to_py)?;
    Ok(core::estimate_round_time(&client, &model))
}

#[pyfunction]
fn cluster(population: &PyPopulation, k: usize) -> PyResult<PyClusterSet> {
    Ok(PyClusterSet {
        inner: core::cluster(&population.inner, k).map_err(to_py)?,
    })
}

/// Knee of a curve as `(index, x, y)`, or `None`.
#[pyfunction]
#[pyo3(signature = (xs, ys, sensitivity=1.0))]
fn kneedle(xs: Vec<f64>, ys: Vec<f64>, sensitivity: f64) -> PyResult<Option<(usize, f64, f64)>> {
    let curve = KneeCurve::from_xy(&xs, &ys).map_err(to_py)?;
    let knee = core::kneedle(&curve, sensitivity).map_err(to_py)?;
    Ok(knee.map(|k| (k.index, k.x, k.y)))
}

/// Sweep k in `1..=k_max` and return the chosen k with the curve as JSON.
#[pyfunction]
#[pyo3(signature = (population, k_max, rounds, clients_per_round, seed=0, sensitivity=1.0))]
fn optimal_k(
    population: &PyPopulation,
    k_max: usize,
    rounds: usize,
    clients_per_round: usize,
    seed: u64,
    sensitivity: f64,
) -> PyResult<(usize, String)> {
    let opt = core::optimal_k(&population.inner, 1..=k_max, rounds, clients_per_round, seed, sensitivity)
        .map_err(to_py)?;
    let json = serde_json::to_string(&opt).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok((opt.k, json))
}

/// Simulate `rounds` rounds. `policy` is "random", "fedcs" or "fedss";
/// FedCS needs `overselect`, FedSS needs `k`.
#[pyfunction]
#[pyo3(signature = (population, policy, clients_per_round, rounds, seed=0, overselect=None, k=None))]
fn simulate(
    population: &PyPopulation,
    policy: &str,
    clients_per_round: usize,
    rounds: usize,
    seed: u64,
    overselect: Option<usize>,
    k: Option<usize>,
) -> PyResult<PySimulationReport> {
    let kind: PolicyKind = policy.parse().map_err(to_py)?;
    let need = |v: Option<usize>, name: &str| {
        v.ok_or_else(|| PyValueError::new_err(format!("policy {policy} needs {name}")))
    };
    let cfg = match kind {
        PolicyKind::Random => PolicyConfig::random(clients_per_round, seed),
        PolicyKind::FedCs => PolicyConfig::fedcs(clients_per_round, need(overselect, "overselect")?, seed),
        PolicyKind::FedSs => {
            let cs = core::cluster(&population.inner, need(k, "k")?).map_err(to_py)?;
            PolicyConfig::fedss(clients_per_round, cs, seed)
        }
    };
    Ok(PySimulationReport {
        inner: core::simulate(&population.inner, &cfg, rounds).map_err(to_py)?,
    })
}

/// `(accuracy, weighted F1)` of a square confusion matrix.
#[pyfunction]
fn confusion_scores(rows: Vec<Vec<u64>>) -> PyResult<(f64, f64)> {
    let cm = ConfusionMatrix::from_rows(&rows).map_err(to_py)?;
    Ok((cm_accuracy(&cm), cm_f1_weighted(&cm)))
}

/// Run a CLI subcommand on a JSON config; returns `{file name: contents}`.
#[pyfunction]
fn run_command(command: &str, config_json: &str) -> PyResult<Vec<(String, String)>> {
    let cfg = RunConfig::from_json(config_json).map_err(to_py)?;
    let out = match command {
        "cluster" => fedss_core::report::run_cluster(&cfg),
        "knee" => fedss_core::report::run_knee(&cfg),
        "simulate" => fedss_core::report::run_simulate(&cfg),
        "train" => fedss_core::report::run_train(&cfg),
        "compare" => fedss_core::report::run_compare(&cfg),
        other => return Err(PyValueError::new_err(format!("unknown command {other:?}"))),
    }
    .map_err(to_py)?;
    Ok(out
        .names()
        .into_iter()
        .map(|n| (n.to_owned(), out.get(n).unwrap_or_default().to_owned()))
        .collect())
}

#[pymodule]
fn fedss(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPopulation>()?;
    m.add_class::<PyClusterSet>()?;
    m.add_class::<PySimulationReport>()?;
    m.add_function(wrap_pyfunction!(estimate_round_time, m)?)?;
    m.add_function(wrap_pyfunction!(cluster, m)?)?;
    m.add_function(wrap_pyfunction!(kneedle, m)?)?;
    m.add_function(wrap_pyfunction!(optimal_k, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(confusion_scores, m)?)?;
    m.add_function(wrap_pyfunction!(run_command, m)?)?;
    Ok(())
}
