//! Python bindings: ring all-reduce, pool assignment, aggregation weights,
//! models, commit/prove/verify, chain validation and the experiment
//! runners.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use fedchain::chain::{validate_chain as validate, ConsensusMode, Ledger};
use fedchain::experiments::{
    accuracy_trends, chain_metrics_csv, latency_trends, run_accuracy_sweep, run_latency_grid, run_single_round,
    sweep_csv, ExperimentConfig, LatencyCell, TrendCheck,
};
use fedchain::fed;
use fedchain::netsim::{self, LatencyMatrix, NodeId, TopologyModel};
use fedchain::pools::{self, EstimatedLatency, HeadPolicy, PoolTime};
use fedchain::sharedring::{self, from_fixed, to_fixed, RingConfig};
use fedchain::verify;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Result of a masked ring all-reduce.
#[pyclass(module = "fedchain_py", frozen)]
struct RingResult {
    inner: sharedring::RingOutcome,
}

#[pymethods]
impl RingResult {
    /// Summed vector held by every miner.
    #[getter]
    fn sum(&self) -> Vec<f64> {
        from_fixed(self.inner.sum())
    }

    #[getter]
    fn outputs(&self) -> Vec<Vec<f64>> {
        self.inner.outputs.iter().map(|o| from_fixed(o)).collect()
    }

    #[getter]
    fn messages(&self) -> usize {
        self.inner.transcript.messages.len()
    }

    fn transcript_csv(&self) -> String {
        self.inner.transcript.to_csv()
    }

    /// Whether miner `receiver` saw only masked data during the reduce pass.
    fn leakage_passed(&self, receiver: usize) -> bool {
        sharedring::transcript_leakage_check(&self.inner.transcript, receiver, &self.inner.raw_splits).passed()
    }
}

#[pyfunction]
#[pyo3(signature = (inputs, noise_seed = 0, zero_noise = false))]
fn ring_all_reduce(inputs: Vec<Vec<f64>>, noise_seed: u64, zero_noise: bool) -> PyResult<RingResult> {
    let fixed = inputs.iter().map(|w| to_fixed(w)).collect::<Result<Vec<_>, _>>().map_err(err)?;
    let cfg = RingConfig { noise_seed, zero_noise, ..RingConfig::default() };
    Ok(RingResult { inner: sharedring::secret_all_reduce(&fixed, &cfg).map_err(err)? })
}

/// Clustered latency matrix in ms; node `i` sits in cluster `i % clusters`.
#[pyfunction]
#[pyo3(signature = (n_nodes, seed, clusters = 5, intra = (5.0, 15.0), inter = (80.0, 120.0)))]
fn clustered_topology(
    n_nodes: usize,
    seed: u64,
    clusters: usize,
    intra: (f64, f64),
    inter: (f64, f64),
) -> PyResult<Vec<Vec<f64>>> {
    let model =
        TopologyModel::Clustered { clusters, intra_lo: intra.0, intra_hi: intra.1, inter_lo: inter.0, inter_hi: inter.1 };
    let m = netsim::build_topology(n_nodes, seed, &model).map_err(err)?;
    Ok(rows(&m))
}

fn rows(m: &LatencyMatrix) -> Vec<Vec<f64>> {
    (0..m.n()).map(|i| (0..m.n()).map(|j| m.get(NodeId(i), NodeId(j))).collect()).collect()
}

/// Greedy pool assignment on a latency matrix with a fixed `t_p` per pool.
/// Returns member lists, head first.
#[pyfunction]
#[pyo3(signature = (latency, n_pools, seed, t_p = 0.0, policy = "spread"))]
fn assign_pools(latency: Vec<Vec<f64>>, n_pools: usize, seed: u64, t_p: f64, policy: &str) -> PyResult<Vec<Vec<usize>>> {
    let policy = match policy {
        "spread" => HeadPolicy::Spread,
        "random" => HeadPolicy::Random,
        other => return Err(err(format!("unknown head policy {other:?}"))),
    };
    let m = LatencyMatrix::from_rows(latency).map_err(err)?;
    let l_hat = EstimatedLatency::from_matrix(&m);
    let heads = pools::announce_heads(m.n(), n_pools, policy, &l_hat, seed).map_err(err)?;
    let a = pools::assign_pools(m.n(), &heads, &l_hat, &PoolTime::Fixed(vec![t_p; heads.len()]), seed).map_err(err)?;
    Ok(a.pools.iter().map(|p| p.members.iter().map(|n| n.0).collect()).collect())
}

/// D_KL(p || q) in bits, both histograms smoothed first.
#[pyfunction]
fn kl_divergence(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    let p = fed::LabelHistogram::new(p).map_err(err)?.smoothed(fed::HISTOGRAM_EPSILON);
    let q = fed::LabelHistogram::new(q).map_err(err)?.smoothed(fed::HISTOGRAM_EPSILON);
    fed::kl_divergence(&p, &q).map_err(err)
}

#[pyfunction]
fn fedavg_weights(sizes: Vec<usize>) -> PyResult<Vec<f64>> {
    Ok(fed::fedavg_weights(&sizes).map_err(err)?.weights)
}

#[pyfunction]
fn kl_weights(divergences: Vec<f64>, sizes: Vec<usize>) -> PyResult<Vec<f64>> {
    Ok(fed::weights_from_divergences(&divergences, &sizes).map_err(err)?.weights)
}

#[pyclass(module = "fedchain_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Dataset {
    inner: fed::Dataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    #[pyo3(signature = (n_samples = 2000, n_features = 16, n_classes = 10, seed = 2024))]
    fn synthetic(n_samples: usize, n_features: usize, n_classes: usize, seed: u64) -> Self {
        let spec = fed::SyntheticSpec { n_samples, n_features, n_classes, seed, ..Default::default() };
        Self { inner: fed::synthetic_dataset(&spec) }
    }

    #[staticmethod]
    fn from_csv(text: &str) -> PyResult<Self> {
        Ok(Self { inner: fed::Dataset::from_csv(text).map_err(err)? })
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }

    fn split(&self, test_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let (a, b) = self.inner.train_test_split(test_fraction, seed);
        (Dataset { inner: a }, Dataset { inner: b })
    }

    fn histogram(&self) -> Vec<f64> {
        self.inner.histogram().freq().to_vec()
    }

    #[getter]
    fn n_features(&self) -> usize {
        self.inner.n_features()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(module = "fedchain_py", skip_from_py_object)]
#[derive(Clone)]
struct Model {
    inner: fed::Model,
}

#[pymethods]
impl Model {
    /// Softmax regression, or a one-hidden-layer MLP when `hidden` is set.
    #[new]
    #[pyo3(signature = (features, classes, hidden = None, seed = 0))]
    fn new(features: usize, classes: usize, hidden: Option<usize>, seed: u64) -> Self {
        let arch = match hidden {
            Some(hidden) => fed::Architecture::Mlp { features, hidden, classes },
            None => fed::Architecture::Softmax { features, classes },
        };
        Self { inner: fed::Model::init(arch, seed) }
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights.clone()
    }

    #[pyo3(signature = (data, learning_rate = 0.1, epochs = 1, batch_size = 16, seed = 0))]
    fn train(&self, data: &Dataset, learning_rate: f64, epochs: u32, batch_size: usize, seed: u64) -> PyResult<Model> {
        let cfg = fed::TrainConfig { learning_rate, local_epochs: epochs, batch_size, seed, ..Default::default() };
        Ok(Model { inner: fed::local_train(&self.inner, &data.inner, &cfg).map_err(err)? })
    }

    fn evaluate(&self, data: &Dataset) -> f64 {
        fed::evaluate(&self.inner, &data.inner)
    }

    fn predict(&self, x: Vec<f64>) -> usize {
        self.inner.predict(&x)
    }

    fn gradient_check(&self, data: &Dataset) -> PyResult<f64> {
        fed::gradient_check(&self.inner, &data.inner).map_err(err)
    }

    /// Canonical fixed-point serialisation.
    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new(py, &verify::serialize_model(&self.inner).map_err(err)?))
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Model> {
        Ok(Model { inner: verify::deserialize_model(data).map_err(err)? })
    }
}

/// Commits to `model`, draws `k` challenge samples from `held_out`, proves
/// and verifies. Returns `(commitment_hex, accepted, accuracy)`.
#[pyfunction]
#[pyo3(signature = (model, held_out, k, seed = 0, tamper = false))]
fn commit_prove_verify(model: &Model, held_out: &Dataset, k: usize, seed: u64, tamper: bool) -> PyResult<(String, bool, f64)> {
    let pp = verify::keygen(128, seed).map_err(err)?;
    let r = verify::Blinding::random(seed);
    let m = verify::quantize(&model.inner).map_err(err)?;
    let com = verify::commit(&m, &pp, &r).map_err(err)?;
    let x = verify::draw_challenge(&held_out.inner, k, &com.com).map_err(err)?;
    let mut proof = verify::prove(&m, &x, &pp, &r).map_err(err)?;
    if tamper {
        proof.y[0] = (proof.y[0] + 1) % m.arch.classes();
    }
    let v = verify::verify(&com, &x, &proof.y, &proof.pi, &pp);
    Ok((com.hex(), v.accepted, v.accuracy))
}

/// Validates an exported ledger (JSON lines). Returns the violations as
/// `(height, detail)` pairs; empty means valid.
#[pyfunction]
fn validate_chain(ledger_jsonl: &str) -> PyResult<Vec<(u64, String)>> {
    let ledger = Ledger::import(ledger_jsonl).map_err(err)?;
    Ok(validate(&ledger).violations.into_iter().map(|v| (v.height, format!("{:?}: {}", v.kind, v.detail))).collect())
}

fn trend_tuples(trends: Vec<TrendCheck>) -> Vec<(String, Option<bool>, String)> {
    trends.into_iter().map(|t| (t.name, t.passed, t.detail)).collect()
}

/// Experiment configuration; construct from TOML text (empty for defaults).
#[pyclass(module = "fedchain_py")]
struct Experiment {
    cfg: ExperimentConfig,
}

#[pymethods]
impl Experiment {
    #[new]
    #[pyo3(signature = (toml = ""))]
    fn new(toml: &str) -> PyResult<Self> {
        let cfg = ExperimentConfig::from_toml(toml).map_err(err)?;
        cfg.validate().map_err(err)?;
        Ok(Self { cfg })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { cfg: ExperimentConfig::load(&path).map_err(err)? })
    }

    fn to_toml(&self) -> String {
        self.cfg.to_toml()
    }

    fn fingerprint(&self) -> String {
        self.cfg.fingerprint()
    }

    /// Returns `(chain_metrics_csv, trends)`.
    fn latency_grid(&self, py: Python<'_>) -> PyResult<(String, Vec<(String, Option<bool>, String)>)> {
        let grid = py.detach(|| run_latency_grid(&self.cfg)).map_err(err)?;
        Ok((chain_metrics_csv(&grid.records), trend_tuples(latency_trends(&grid.records))))
    }

    /// Returns `(sweep_csv, trends)`.
    fn accuracy_sweep(&self, py: Python<'_>) -> PyResult<(String, Vec<(String, Option<bool>, String)>)> {
        let records = py.detach(|| run_accuracy_sweep(&self.cfg)).map_err(err)?;
        Ok((sweep_csv(&records), trend_tuples(accuracy_trends(&records, self.cfg.sweep.round_budget))))
    }

    /// Runs one traced task and writes its artifacts to `out_dir`; returns
    /// the written paths.
    #[pyo3(signature = (out_dir, mode = "fedchain", n_nodes = 10, n_pools = 2, seed = 1))]
    fn single_round(&self, out_dir: PathBuf, mode: &str, n_nodes: usize, n_pools: usize, seed: u64) -> PyResult<Vec<PathBuf>> {
        let mode: ConsensusMode = mode.parse().map_err(err)?;
        let cell = LatencyCell { mode, n_nodes, n_pools, seed };
        let single = run_single_round(&self.cfg, &cell).map_err(err)?;
        single.write(&out_dir).map_err(err)
    }
}

#[pymodule]
fn fedchain_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<RingResult>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_class::<Experiment>()?;
    m.add_function(wrap_pyfunction!(ring_all_reduce, m)?)?;
    m.add_function(wrap_pyfunction!(clustered_topology, m)?)?;
    m.add_function(wrap_pyfunction!(assign_pools, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(fedavg_weights, m)?)?;
    m.add_function(wrap_pyfunction!(kl_weights, m)?)?;
    m.add_function(wrap_pyfunction!(commit_prove_verify, m)?)?;
    m.add_function(wrap_pyfunction!(validate_chain, m)?)?;
    Ok(())
}
