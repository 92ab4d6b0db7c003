//! Experiment runner: latency grids across consensus modes, accuracy
//! sweeps across label skew, trend checks and report emission.
//!
//! Every grid cell owns its simulator, so cells run in parallel; results are
//! collected in cell order and the report is assembled serially.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chain::{derive_seed, validate_chain, Chain, ChainError, ConsensusMode, FedMetric, Network, RoundParams, Task};
use crate::fed::{
    aggregate, compute_weights, evaluate, local_loss, local_train, partition_noniid, partition_with_profile,
    synthetic_dataset, AggregationScheme, Architecture, Dataset, FedError, Model, PartSpec, SyntheticSpec,
    TrainConfig,
};
use crate::netsim::{build_topology, draw_compute_times, Millis, NetsimError, TopologyModel};
use crate::pools::{
    announce_heads, assign_pools, bootstrap_history, estimate_latency, HeadPolicy, PoolAssignment, PoolError,
    PoolTime, PoolTimeModel,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("cannot parse config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("no records to report")]
    EmptyRecords,
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Fed(#[from] FedError),
    #[error(transparent)]
    Netsim(#[from] NetsimError),
    #[error(transparent)]
    Pools(#[from] PoolError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

/// Population used by the accuracy sweep: a few balanced miners and a
/// majority of larger miners whose labels concentrate on a few classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub miners: usize,
    pub balanced_miners: usize,
    pub balanced_size: usize,
    pub skewed_size: usize,
    /// Skewed miner `j` prefers class `j % skewed_classes`.
    pub skewed_classes: usize,
    /// FL rounds before a run is cut off.
    pub round_budget: u32,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { miners: 10, balanced_miners: 3, balanced_size: 40, skewed_size: 100, skewed_classes: 2, round_budget: 60 }
    }
}

/// Everything a grid or sweep run depends on. Read from TOML; every field
/// has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub modes: Vec<ConsensusMode>,
    pub n_nodes: Vec<usize>,
    pub n_pools: Vec<usize>,
    /// Label-skew values for the accuracy sweep.
    pub alphas: Vec<f64>,
    pub schemes: Vec<AggregationScheme>,
    /// Base seed; run `i` uses `seed + i`.
    pub seed: u64,
    pub runs: usize,
    pub target: f64,
    /// Task deadline, relative to publication.
    pub deadline_ms: Millis,
    /// Dataset fixture (CSV); synthetic data when absent.
    pub dataset: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    /// Hidden width; a softmax model when absent.
    pub hidden: Option<usize>,
    pub example_fraction: f64,
    pub held_out_fraction: f64,
    /// Label skew of node data in latency runs.
    pub latency_alpha: f64,
    pub topology: TopologyModel,
    pub compute_lo: Millis,
    pub compute_hi: Millis,
    pub head_policy: HeadPolicy,
    /// Tasks mined back to back in each latency cell.
    pub tasks_per_cell: u32,
    pub reward: u64,
    pub challenge_k: usize,
    pub round: RoundParams,
    pub sweep: SweepConfig,
    #[serde(skip)]
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            modes: ConsensusMode::ALL.to_vec(),
            n_nodes: vec![20, 50, 100],
            n_pools: vec![2, 5, 10],
            alphas: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
            schemes: vec![AggregationScheme::FedAvg, AggregationScheme::Kl],
            seed: 1,
            runs: 5,
            target: 0.9,
            deadline_ms: 600_000.0,
            dataset: None,
            synthetic: SyntheticSpec::default(),
            hidden: None,
            example_fraction: 0.1,
            held_out_fraction: 0.2,
            latency_alpha: 0.1,
            topology: TopologyModel::Clustered {
                clusters: 5,
                intra_lo: 5.0,
                intra_hi: 15.0,
                inter_lo: 80.0,
                inter_hi: 120.0,
            },
            compute_lo: 50.0,
            compute_hi: 200.0,
            head_policy: HeadPolicy::Spread,
            tasks_per_cell: 1,
            reward: 1000,
            challenge_k: 300,
            round: RoundParams::default(),
            sweep: SweepConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.runs as u64).map(|i| self.seed + i).collect()
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON form. The
    /// output directory is not part of it.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&json))[..16].to_string()
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Config(m.to_string()));
        if self.modes.is_empty() || self.n_nodes.is_empty() || self.n_pools.is_empty() {
            return bad("modes, n_nodes and n_pools must be non-empty");
        }
        if self.alphas.is_empty() || self.schemes.is_empty() || self.runs == 0 {
            return bad("alphas, schemes and runs must be non-empty");
        }
        if self.n_nodes.iter().any(|&n| n < 2) || self.n_pools.contains(&0) {
            return bad("every n_nodes entry must be >= 2 and every n_pools entry >= 1");
        }
        if !self.n_nodes.iter().any(|&n| self.n_pools.iter().any(|&p| p <= n)) {
            return bad("no (n_nodes, n_pools) pair has n_pools <= n_nodes");
        }
        if self.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) || !(0.0..=1.0).contains(&self.latency_alpha) {
            return bad("skew values must lie in [0, 1]");
        }
        if !(self.target > 0.0 && self.target <= 1.0) || !(self.deadline_ms > 0.0) {
            return bad("target must be in (0, 1] and deadline_ms positive");
        }
        let (e, h) = (self.example_fraction, self.held_out_fraction);
        if !(e > 0.0 && h > 0.0 && e + h < 1.0) {
            return bad("example and held-out fractions must be positive and leave training data");
        }
        if !(self.compute_lo > 0.0 && self.compute_lo <= self.compute_hi) {
            return bad("compute range must be positive and ordered");
        }
        if self.tasks_per_cell == 0 || self.challenge_k == 0 {
            return bad("tasks_per_cell and challenge_k must be positive");
        }
        let s = &self.sweep;
        if s.miners == 0 || s.balanced_miners > s.miners || s.skewed_classes == 0 || s.round_budget == 0 {
            return bad("sweep population is empty or inconsistent");
        }
        if s.balanced_size == 0 || s.skewed_size == 0 {
            return bad("sweep miner sizes must be positive");
        }
        self.round.train.validate()?;
        Ok(())
    }
}

/// Publisher example set, verifier held-out set and the pool of training
/// samples handed out to nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub example: Dataset,
    pub held_out: Dataset,
    pub arch: Architecture,
}

impl Splits {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self, ExperimentError> {
        let base = match &cfg.dataset {
            Some(p) => Dataset::load(p)?,
            None => synthetic_dataset(&cfg.synthetic),
        };
        Self::from_dataset(&base, cfg)
    }

    pub fn from_dataset(base: &Dataset, cfg: &ExperimentConfig) -> Result<Self, ExperimentError> {
        let split_seed = cfg.synthetic.seed;
        let (rest, held_out) = base.train_test_split(cfg.held_out_fraction, split_seed);
        let (train, example) = rest.train_test_split(cfg.example_fraction / (1.0 - cfg.held_out_fraction), split_seed + 1);
        if held_out.len() < cfg.challenge_k {
            return Err(ExperimentError::Config(format!(
                "held-out set has {} samples, fewer than challenge_k = {}",
                held_out.len(),
                cfg.challenge_k
            )));
        }
        if example.is_empty() || train.is_empty() {
            return Err(ExperimentError::Config("dataset too small to split".into()));
        }
        let (f, c) = (base.n_features(), base.n_classes());
        let arch = match cfg.hidden {
            Some(hidden) => Architecture::Mlp { features: f, hidden, classes: c },
            None => Architecture::Softmax { features: f, classes: c },
        };
        Ok(Self { train, example, held_out, arch })
    }
}

/// One mined task inside a latency cell; the chain metrics row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRound {
    pub round: u32,
    pub winner_pool: Option<usize>,
    pub latency_ms: Option<Millis>,
    pub accuracy: Option<f64>,
    pub fl_rounds: u32,
    pub fed_metrics: Vec<FedMetric>,
}

/// Result of one latency grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub fingerprint: String,
    pub mode: ConsensusMode,
    pub n_nodes: usize,
    pub n_pools: usize,
    pub seed: u64,
    pub rounds: Vec<ChainRound>,
    /// Mean block latency over the cell's tasks; `None` if any task failed.
    pub latency_ms: Option<Millis>,
    pub accuracy: Option<f64>,
    /// Ledger validated and rewards conserved.
    pub chain_ok: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct LatencyCell {
    pub mode: ConsensusMode,
    pub n_nodes: usize,
    pub n_pools: usize,
    pub seed: u64,
}

/// Cells of the latency grid in report order plus the skipped
/// `(n_nodes, n_pools)` pairs.
pub fn latency_cells(cfg: &ExperimentConfig) -> (Vec<LatencyCell>, Vec<(usize, usize)>) {
    let mut cells = Vec::new();
    let mut skipped = Vec::new();
    for &mode in &cfg.modes {
        for &n_nodes in &cfg.n_nodes {
            for &n_pools in &cfg.n_pools {
                if n_pools > n_nodes {
                    if !skipped.contains(&(n_nodes, n_pools)) {
                        skipped.push((n_nodes, n_pools));
                    }
                    continue;
                }
                for seed in cfg.seeds() {
                    cells.push(LatencyCell { mode, n_nodes, n_pools, seed });
                }
            }
        }
    }
    (cells, skipped)
}

/// Node population of a latency cell. Depends on `(n_nodes, seed)` only, so
/// every mode sees the same nodes.
pub fn build_network(cfg: &ExperimentConfig, splits: &Splits, n_nodes: usize, seed: u64) -> Result<Network, ExperimentError> {
    let n = n_nodes as u64;
    let latency = build_topology(n_nodes, derive_seed(seed, &[10, n]), &cfg.topology)?;
    let compute = draw_compute_times(n_nodes, cfg.compute_lo, cfg.compute_hi, derive_seed(seed, &[11, n]));
    let data = partition_noniid(&splits.train, n_nodes, cfg.latency_alpha, derive_seed(seed, &[12, n]))?;
    Ok(Network { latency, compute, data })
}

/// Head announcement and greedy join on the bootstrap latency estimate.
pub fn build_pools(
    cfg: &ExperimentConfig,
    splits: &Splits,
    net: &Network,
    n_pools: usize,
    seed: u64,
) -> Result<PoolAssignment, ExperimentError> {
    let n = net.n();
    let s = derive_seed(seed, &[13, n as u64, n_pools as u64]);
    let l_hat = estimate_latency(&bootstrap_history(&net.latency, s))?;
    let heads = announce_heads(n, n_pools, cfg.head_policy, &l_hat, s)?;
    let model = PoolTimeModel {
        compute: net.compute.clone(),
        rounds_hint: cfg.round.train.local_epochs,
        model_len: splits.arch.param_count(),
        size_multiplier: cfg.round.size_multiplier,
    };
    Ok(assign_pools(n, &heads, &l_hat, &PoolTime::Estimated(model), s)?)
}

pub fn make_task(cfg: &ExperimentConfig, splits: &Splits, id: u64, now: Millis) -> Task {
    Task {
        id,
        arch: splits.arch,
        example: splits.example.clone(),
        held_out: splits.held_out.clone(),
        target: cfg.target,
        deadline_ms: now + cfg.deadline_ms,
        reward: cfg.reward,
        challenge_k: cfg.challenge_k,
    }
}

/// Round parameters for task `task` of a cell; identical across modes.
pub fn cell_params(cfg: &ExperimentConfig, n_nodes: usize, seed: u64, task: u64) -> RoundParams {
    let s = derive_seed(seed, &[14, n_nodes as u64, task]);
    RoundParams { seed: s, train: TrainConfig { seed: s, accuracy_target: cfg.target, ..cfg.round.train }, ..cfg.round.clone() }
}

/// Mines `tasks_per_cell` tasks on a fresh chain, settling each reward.
/// Returns the record and the chain for inspection.
pub fn run_cell(cfg: &ExperimentConfig, splits: &Splits, cell: &LatencyCell) -> Result<(RunRecord, Chain), ExperimentError> {
    let net = build_network(cfg, splits, cell.n_nodes, cell.seed)?;
    let pools = match cell.mode {
        ConsensusMode::Fedchain => Some(build_pools(cfg, splits, &net, cell.n_pools, cell.seed)?),
        _ => None,
    };
    let mut chain = Chain::new();
    let mut rounds = Vec::new();
    let mut published = 0u64;
    for r in 1..=cfg.tasks_per_cell {
        let task_id = u64::from(r);
        let params = cell_params(cfg, cell.n_nodes, cell.seed, task_id);
        chain.publish_task(params.publisher, make_task(cfg, splits, task_id, chain.now()))?;
        published += cfg.reward;
        let outcome = match &pools {
            Some(p) => chain.run_round_fedchain(task_id, &net, p, &params),
            None => chain.run_round_baseline(task_id, cell.mode, &net, &params),
        };
        match outcome {
            Ok(o) => {
                chain.settle_reward(task_id)?;
                chain.flush_settlements();
                rounds.push(ChainRound {
                    round: r,
                    winner_pool: Some(o.winner_pool),
                    latency_ms: Some(o.latency_ms),
                    accuracy: o.accuracy,
                    fl_rounds: o.fl_rounds,
                    fed_metrics: o.fed_metrics,
                });
            }
            Err(ChainError::RoundFailed { .. }) => rounds.push(ChainRound {
                round: r,
                winner_pool: None,
                latency_ms: None,
                accuracy: None,
                fl_rounds: 0,
                fed_metrics: Vec::new(),
            }),
            Err(e) => return Err(e.into()),
        }
    }
    let chain_ok = validate_chain(&chain.ledger).ok() && chain.total_value() == published;
    let latencies: Option<Vec<f64>> = rounds.iter().map(|r| r.latency_ms).collect();
    let accuracies: Vec<f64> = rounds.iter().filter_map(|r| r.accuracy).collect();
    let record = RunRecord {
        fingerprint: cfg.fingerprint(),
        mode: cell.mode,
        n_nodes: cell.n_nodes,
        n_pools: cell.n_pools,
        seed: cell.seed,
        latency_ms: latencies.map(|l| mean(&l)),
        accuracy: (!accuracies.is_empty()).then(|| mean(&accuracies)),
        rounds,
        chain_ok,
    };
    Ok((record, chain))
}

/// Grid output: records in cell order and the skipped pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyGrid {
    pub records: Vec<RunRecord>,
    pub skipped: Vec<(usize, usize)>,
}

/// Runs every cell of the latency grid. Baseline modes ignore the pool
/// count, so each `(mode, n_nodes, seed)` is simulated once and its record
/// repeated for every pool count.
pub fn run_latency_grid(cfg: &ExperimentConfig) -> Result<LatencyGrid, ExperimentError> {
    cfg.validate()?;
    let splits = Splits::load(cfg)?;
    let (cells, skipped) = latency_cells(cfg);
    let key = |c: &LatencyCell| {
        let p = if c.mode == ConsensusMode::Fedchain { c.n_pools } else { 0 };
        LatencyCell { n_pools: p, ..*c }
    };
    let mut unique: Vec<LatencyCell> = cells.iter().map(key).collect();
    unique.sort();
    unique.dedup();
    let results: Vec<RunRecord> = unique
        .par_iter()
        .map(|c| run_cell(cfg, &splits, c).map(|(r, _)| r))
        .collect::<Result<_, _>>()?;
    let by_key: BTreeMap<LatencyCell, RunRecord> = unique.into_iter().zip(results).collect();
    let records = cells
        .iter()
        .map(|c| RunRecord { n_pools: c.n_pools, ..by_key[&key(c)].clone() })
        .collect();
    Ok(LatencyGrid { records, skipped })
}

/// One accuracy run: a scheme at a skew level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub fingerprint: String,
    pub scheme: AggregationScheme,
    pub alpha: f64,
    pub seed: u64,
    /// First round whose aggregate reaches the target; `None` within budget.
    pub rounds_to_target: Option<u32>,
    /// Accuracy on the example set when the run stopped.
    pub final_accuracy: f64,
    /// Accuracy on the held-out set when the run stopped.
    pub test_accuracy: f64,
    /// `(round, accuracy, mean loss)` per round.
    pub curve: Vec<(u32, f64, f64)>,
}

impl SweepRecord {
    /// Rounds to target, counting an unfinished run as budget + 1.
    pub fn rounds_or_cap(&self, budget: u32) -> u32 {
        self.rounds_to_target.unwrap_or(budget + 1)
    }
}

/// Miner datasets for the sweep at skew `alpha`. Balanced miners have no
/// skew; the rest prefer one of the first `skewed_classes` classes.
pub fn sweep_population(cfg: &ExperimentConfig, splits: &Splits, alpha: f64, seed: u64) -> Result<Vec<Dataset>, ExperimentError> {
    let s = &cfg.sweep;
    let parts: Vec<PartSpec> = (0..s.miners)
        .map(|j| {
            if j < s.balanced_miners {
                PartSpec { size: s.balanced_size, skew: 0.0, preferred: 0 }
            } else {
                PartSpec { size: s.skewed_size, skew: alpha, preferred: (j - s.balanced_miners) % s.skewed_classes }
            }
        })
        .collect();
    Ok(partition_with_profile(&splits.train, &parts, derive_seed(seed, &[20, alpha.to_bits()]))?)
}

/// Plain federated loop over the sweep population until the aggregate
/// reaches the target on the example set or the budget runs out. Both
/// schemes share the population, the initial model and the per-miner
/// training seeds.
pub fn run_sweep_cell(
    cfg: &ExperimentConfig,
    splits: &Splits,
    scheme: AggregationScheme,
    alpha: f64,
    seed: u64,
) -> Result<SweepRecord, ExperimentError> {
    let miners = sweep_population(cfg, splits, alpha, seed)?;
    let refs: Vec<&Dataset> = miners.iter().collect();
    let weights = compute_weights(scheme, &refs, &splits.example.histogram())?;
    let mut global = Model::init(splits.arch, derive_seed(seed, &[21, alpha.to_bits()]));
    let mut curve = Vec::new();
    let mut rounds_to_target = None;
    let mut accuracy = evaluate(&global, &splits.example);
    for round in 0..cfg.sweep.round_budget {
        let trained = miners
            .iter()
            .enumerate()
            .map(|(j, d)| {
                let train = TrainConfig {
                    seed: derive_seed(seed, &[22, alpha.to_bits(), j as u64, u64::from(round)]),
                    ..cfg.round.train
                };
                local_train(&global, d, &train).map(|m| m.weights)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let models: Vec<&[f64]> = trained.iter().map(|w| w.as_slice()).collect();
        global = Model::from_weights(splits.arch, aggregate(&models, &weights)?)?;
        accuracy = evaluate(&global, &splits.example);
        let loss = local_loss(&global, &splits.example)? / splits.example.len() as f64;
        curve.push((round + 1, accuracy, loss));
        if accuracy >= cfg.target {
            rounds_to_target = Some(round + 1);
            break;
        }
    }
    Ok(SweepRecord {
        fingerprint: cfg.fingerprint(),
        scheme,
        alpha,
        seed,
        rounds_to_target,
        final_accuracy: accuracy,
        test_accuracy: evaluate(&global, &splits.held_out),
        curve,
    })
}

/// Runs every `(alpha, scheme, seed)` cell in that order.
pub fn run_accuracy_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRecord>, ExperimentError> {
    cfg.validate()?;
    let splits = Splits::load(cfg)?;
    let mut cells = Vec::new();
    for &alpha in &cfg.alphas {
        for &scheme in &cfg.schemes {
            for seed in cfg.seeds() {
                cells.push((scheme, alpha, seed));
            }
        }
    }
    cells.par_iter().map(|&(scheme, alpha, seed)| run_sweep_cell(cfg, &splits, scheme, alpha, seed)).collect()
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
pub fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        (s[m - 1] + s[m]) / 2.0
    }
}

/// `sqrt(((n_a - 1) s_a^2 + (n_b - 1) s_b^2) / (n_a + n_b - 2))`.
pub fn pooled_sd(a: &[f64], b: &[f64]) -> f64 {
    let dof = (a.len() + b.len()).saturating_sub(2);
    if dof == 0 {
        return 0.0;
    }
    let ss = |v: &[f64]| (v.len().saturating_sub(1)) as f64 * sample_sd(v).powi(2);
    ((ss(a) + ss(b)) / dof as f64).sqrt()
}

/// Outcome of one encoded trend assertion; `passed` is `None` when the
/// grid does not contain the cells it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub name: String,
    pub passed: Option<bool>,
    pub detail: String,
}

impl TrendCheck {
    fn new(name: &str, passed: Option<bool>, detail: String) -> Self {
        Self { name: name.to_string(), passed, detail }
    }

    pub fn status(&self) -> &'static str {
        match self.passed {
            Some(true) => "pass",
            Some(false) => "FAIL",
            None => "skipped",
        }
    }
}

/// Per-cell latencies over seeds; `None` if the cell is absent or any run
/// failed. Baseline records are matched on any pool count.
pub fn latencies(records: &[RunRecord], mode: ConsensusMode, n_nodes: usize, n_pools: Option<usize>) -> Option<Vec<f64>> {
    let mut by_seed: BTreeMap<u64, Option<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.mode == mode && r.n_nodes == n_nodes && n_pools.is_none_or(|p| r.n_pools == p)) {
        by_seed.entry(r.seed).or_insert(r.latency_ms);
    }
    if by_seed.is_empty() {
        return None;
    }
    by_seed.into_values().collect()
}

pub const TREND_NODES: usize = 50;
pub const TREND_POOLS: usize = 5;
pub const TREND_POOL_SWEEP: [usize; 3] = [2, 5, 10];
pub const TREND_NODE_SWEEP: [usize; 3] = [10, 20, 40];

fn fmt_means(means: &[f64]) -> String {
    means.iter().map(|m| format!("{m:.1}")).collect::<Vec<_>>().join(" > ")
}

/// Ordering claims on mean latency over seeds.
pub fn latency_trends(records: &[RunRecord]) -> Vec<TrendCheck> {
    let mut out = Vec::new();
    let fc = latencies(records, ConsensusMode::Fedchain, TREND_NODES, Some(TREND_POOLS)).map(|v| mean(&v));
    for other in [ConsensusMode::GflRing, ConsensusMode::FedavgCentral] {
        let name = format!("fedchain < {other} at n={TREND_NODES}, pools={TREND_POOLS}");
        let o = latencies(records, other, TREND_NODES, None).map(|v| mean(&v));
        out.push(match (fc, o) {
            (Some(a), Some(b)) => TrendCheck::new(&name, Some(a < b), format!("{a:.1} ms vs {b:.1} ms")),
            _ => TrendCheck::new(&name, None, "cells missing".into()),
        });
    }
    let name = format!("fedchain latency decreases over pools {TREND_POOL_SWEEP:?} at n={TREND_NODES}");
    let pools: Option<Vec<f64>> = TREND_POOL_SWEEP
        .iter()
        .map(|&p| latencies(records, ConsensusMode::Fedchain, TREND_NODES, Some(p)).map(|v| mean(&v)))
        .collect();
    out.push(match pools {
        Some(m) => TrendCheck::new(&name, Some(m.windows(2).all(|w| w[1] < w[0])), fmt_means(&m)),
        None => TrendCheck::new(&name, None, "cells missing".into()),
    });
    let name = format!("fedavg_central latency increases over n {TREND_NODE_SWEEP:?}");
    let nodes: Option<Vec<f64>> = TREND_NODE_SWEEP
        .iter()
        .map(|&n| latencies(records, ConsensusMode::FedavgCentral, n, None).map(|v| mean(&v)))
        .collect();
    out.push(match nodes {
        Some(m) => TrendCheck::new(
            &name,
            Some(m.windows(2).all(|w| w[1] > w[0])),
            m.iter().map(|x| format!("{x:.1}")).collect::<Vec<_>>().join(" < "),
        ),
        None => TrendCheck::new(&name, None, "cells missing".into()),
    });
    out
}

pub const SKEW_HIGH: f64 = 0.8;
pub const SKEW_LOW: f64 = 0.1;

/// Rounds to target per seed, unfinished runs counted as budget + 1.
pub fn rounds_to_target(records: &[SweepRecord], scheme: AggregationScheme, alpha: f64, budget: u32) -> Vec<f64> {
    records
        .iter()
        .filter(|r| r.scheme == scheme && (r.alpha - alpha).abs() < 1e-12)
        .map(|r| f64::from(r.rounds_or_cap(budget)))
        .collect()
}

/// KL beats FedAvg on median rounds at high skew; the two agree within two
/// pooled standard deviations at low skew.
pub fn accuracy_trends(records: &[SweepRecord], budget: u32) -> Vec<TrendCheck> {
    let (kl, fa) = (AggregationScheme::Kl, AggregationScheme::FedAvg);
    let mut out = Vec::new();
    let name = format!("kl needs fewer rounds than fedavg at alpha={SKEW_HIGH} (median)");
    let (a, b) = (rounds_to_target(records, kl, SKEW_HIGH, budget), rounds_to_target(records, fa, SKEW_HIGH, budget));
    out.push(if a.is_empty() || b.is_empty() {
        TrendCheck::new(&name, None, "cells missing".into())
    } else {
        let (ma, mb) = (median(&a), median(&b));
        TrendCheck::new(&name, Some(ma < mb), format!("{ma} vs {mb} rounds"))
    });
    let name = format!("kl and fedavg within 2 pooled sd at alpha={SKEW_LOW}");
    let (a, b) = (rounds_to_target(records, kl, SKEW_LOW, budget), rounds_to_target(records, fa, SKEW_LOW, budget));
    out.push(if a.is_empty() || b.is_empty() {
        TrendCheck::new(&name, None, "cells missing".into())
    } else {
        let (diff, sd) = ((mean(&a) - mean(&b)).abs(), pooled_sd(&a, &b));
        TrendCheck::new(&name, Some(diff <= 2.0 * sd), format!("|{:.2} - {:.2}| = {diff:.2}, pooled sd {sd:.2}", mean(&a), mean(&b)))
    });
    out
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `mode,n_nodes,n_pools,round,winner_pool,latency_ms,accuracy` rows, one
/// per mined task.
pub fn chain_metrics_csv(records: &[RunRecord]) -> String {
    let mut out = String::from("mode,n_nodes,n_pools,round,winner_pool,latency_ms,accuracy\n");
    for r in records {
        for c in &r.rounds {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.mode,
                r.n_nodes,
                r.n_pools,
                c.round,
                opt(c.winner_pool),
                opt(c.latency_ms),
                opt(c.accuracy)
            );
        }
    }
    out
}

/// Mean and sample sd of latency over seeds per `(mode, n_nodes, n_pools)`.
pub fn latency_summary_csv(records: &[RunRecord]) -> String {
    let mut groups: BTreeMap<(usize, usize, usize), (ConsensusMode, Vec<f64>, usize, Vec<f64>)> = BTreeMap::new();
    let order = |m: ConsensusMode| ConsensusMode::ALL.iter().position(|x| *x == m).unwrap_or(0);
    for r in records {
        let e = groups.entry((order(r.mode), r.n_nodes, r.n_pools)).or_insert((r.mode, Vec::new(), 0, Vec::new()));
        match r.latency_ms {
            Some(l) => e.1.push(l),
            None => e.2 += 1,
        }
        if let Some(a) = r.accuracy {
            e.3.push(a);
        }
    }
    let mut out = String::from("mode,n_nodes,n_pools,runs,failed,mean_latency_ms,sd_latency_ms,mean_accuracy\n");
    for ((_, n, p), (mode, lat, failed, acc)) in groups {
        let acc = if acc.is_empty() { String::new() } else { format!("{:.4}", mean(&acc)) };
        let (m, sd) = if lat.is_empty() { (String::new(), String::new()) } else { (format!("{:.3}", mean(&lat)), format!("{:.3}", sample_sd(&lat))) };
        let _ = writeln!(out, "{mode},{n},{p},{},{failed},{m},{sd},{acc}", lat.len() + failed);
    }
    out
}

/// `scheme,alpha,seed,rounds_to_target,final_accuracy,test_accuracy`.
pub fn sweep_csv(records: &[SweepRecord]) -> String {
    let mut out = String::from("scheme,alpha,seed,rounds_to_target,final_accuracy,test_accuracy\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.scheme,
            r.alpha,
            r.seed,
            opt(r.rounds_to_target),
            r.final_accuracy,
            r.test_accuracy
        );
    }
    out
}

/// `scheme,alpha,seed,round,accuracy,loss` for every recorded round.
pub fn sweep_curves_csv(records: &[SweepRecord]) -> String {
    let mut out = String::from("scheme,alpha,seed,round,accuracy,loss\n");
    for r in records {
        for (round, acc, loss) in &r.curve {
            let _ = writeln!(out, "{},{},{},{round},{acc},{loss}", r.scheme, r.alpha, r.seed);
        }
    }
    out
}

/// Records handed to [`render_report`].
#[derive(Debug, Clone, Copy)]
pub enum Records<'a> {
    Latency { records: &'a [RunRecord], skipped: &'a [(usize, usize)] },
    Accuracy { records: &'a [SweepRecord], budget: u32 },
}

impl Records<'_> {
    fn is_empty(&self) -> bool {
        match self {
            Records::Latency { records, .. } => records.is_empty(),
            Records::Accuracy { records, .. } => records.is_empty(),
        }
    }

    pub fn trends(&self) -> Vec<TrendCheck> {
        match *self {
            Records::Latency { records, .. } => latency_trends(records),
            Records::Accuracy { records, budget } => accuracy_trends(records, budget),
        }
    }
}

/// Report artifacts as `(file name, contents)`, in a fixed order.
pub fn render_report(cfg: &ExperimentConfig, records: Records<'_>) -> Result<Vec<(String, String)>, ExperimentError> {
    if records.is_empty() {
        return Err(ExperimentError::EmptyRecords);
    }
    let fingerprint = cfg.fingerprint();
    let trends = records.trends();
    let mut md = String::new();
    let mut files = Vec::new();
    match records {
        Records::Latency { records, skipped } => {
            let summary = latency_summary_csv(records);
            let _ = writeln!(md, "# Latency grid\n");
            let _ = writeln!(md, "- config fingerprint: `{fingerprint}`");
            let _ = writeln!(md, "- seeds: {:?}", cfg.seeds());
            let _ = writeln!(md, "- records: {}", records.len());
            for (n, p) in skipped {
                let _ = writeln!(md, "- skipped: n_nodes={n}, n_pools={p} (more pools than nodes)");
            }
            let bad = records.iter().filter(|r| !r.chain_ok).count();
            let _ = writeln!(md, "- chains failing validation: {bad}\n");
            md.push_str(&csv_to_markdown(&summary));
            files.push(("latency_grid.csv".to_string(), chain_metrics_csv(records)));
            files.push(("latency_summary.csv".to_string(), summary));
        }
        Records::Accuracy { records, budget } => {
            let _ = writeln!(md, "# Accuracy sweep\n");
            let _ = writeln!(md, "- config fingerprint: `{fingerprint}`");
            let _ = writeln!(md, "- seeds: {:?}", cfg.seeds());
            let _ = writeln!(md, "- target: {}, round budget: {budget}\n", cfg.target);
            let mut table = String::from("scheme,alpha,runs,reached,median_rounds,mean_rounds,sd_rounds,mean_test_accuracy\n");
            let mut keys: Vec<(u64, AggregationScheme)> = records.iter().map(|r| (r.alpha.to_bits(), r.scheme)).collect();
            keys.dedup();
            let mut seen = Vec::new();
            for (a, s) in keys {
                if seen.contains(&(a, s)) {
                    continue;
                }
                seen.push((a, s));
                let alpha = f64::from_bits(a);
                let rows: Vec<&SweepRecord> = records.iter().filter(|r| r.alpha.to_bits() == a && r.scheme == s).collect();
                let rounds: Vec<f64> = rows.iter().map(|r| f64::from(r.rounds_or_cap(budget))).collect();
                let test: Vec<f64> = rows.iter().map(|r| r.test_accuracy).collect();
                let reached = rows.iter().filter(|r| r.rounds_to_target.is_some()).count();
                let _ = writeln!(
                    table,
                    "{s},{alpha},{},{reached},{},{:.2},{:.2},{:.4}",
                    rows.len(),
                    median(&rounds),
                    mean(&rounds),
                    sample_sd(&rounds),
                    mean(&test)
                );
            }
            md.push_str(&csv_to_markdown(&table));
            files.push(("accuracy_sweep.csv".to_string(), sweep_csv(records)));
            files.push(("accuracy_curves.csv".to_string(), sweep_curves_csv(records)));
            files.push(("accuracy_summary.csv".to_string(), table));
        }
    }
    let _ = writeln!(md, "\n## Trend checks\n");
    for t in &trends {
        let _ = writeln!(md, "- [{}] {}: {}", t.status(), t.name, t.detail);
    }
    files.push(("report.md".to_string(), md));
    Ok(files)
}

fn csv_to_markdown(csv: &str) -> String {
    let mut out = String::new();
    for (i, line) in csv.lines().enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        let _ = writeln!(out, "| {} |", cells.join(" | "));
        if i == 0 {
            let _ = writeln!(out, "|{}", "---|".repeat(cells.len()));
        }
    }
    out
}

/// Writes the report files under `dir`, creating it if needed.
pub fn emit_report(dir: &Path, cfg: &ExperimentConfig, records: Records<'_>) -> Result<Vec<PathBuf>, ExperimentError> {
    let files = render_report(cfg, records)?;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    for (name, text) in files {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(io_err(&path))?;
        written.push(path);
    }
    Ok(written)
}

/// Artifacts of a traced single cell.
#[derive(Debug, Clone)]
pub struct SingleRound {
    pub record: RunRecord,
    pub chain: Chain,
    pub pools: Option<PoolAssignment>,
    pub trace_csv: Option<String>,
    pub transcript_csv: Option<String>,
    pub model: Option<Vec<u8>>,
}

/// One task on one cell with tracing on.
pub fn run_single_round(cfg: &ExperimentConfig, cell: &LatencyCell) -> Result<SingleRound, ExperimentError> {
    cfg.validate()?;
    if cell.n_pools > cell.n_nodes {
        return Err(ExperimentError::Config(format!("{} pools for {} nodes", cell.n_pools, cell.n_nodes)));
    }
    let splits = Splits::load(cfg)?;
    let net = build_network(cfg, &splits, cell.n_nodes, cell.seed)?;
    let pools = match cell.mode {
        ConsensusMode::Fedchain => Some(build_pools(cfg, &splits, &net, cell.n_pools, cell.seed)?),
        _ => None,
    };
    let params = RoundParams { trace: true, ..cell_params(cfg, cell.n_nodes, cell.seed, 1) };
    let mut chain = Chain::new();
    chain.publish_task(params.publisher, make_task(cfg, &splits, 1, 0.0))?;
    let outcome = match &pools {
        Some(p) => chain.run_round_fedchain(1, &net, p, &params)?,
        None => chain.run_round_baseline(1, cell.mode, &net, &params)?,
    };
    chain.settle_reward(1)?;
    chain.flush_settlements();
    let chain_ok = validate_chain(&chain.ledger).ok() && chain.total_value() == cfg.reward;
    let model = outcome.model.as_ref().map(crate::verify::serialize_model).transpose().map_err(ChainError::from)?;
    let record = RunRecord {
        fingerprint: cfg.fingerprint(),
        mode: cell.mode,
        n_nodes: cell.n_nodes,
        n_pools: cell.n_pools,
        seed: cell.seed,
        rounds: vec![ChainRound {
            round: 1,
            winner_pool: Some(outcome.winner_pool),
            latency_ms: Some(outcome.latency_ms),
            accuracy: outcome.accuracy,
            fl_rounds: outcome.fl_rounds,
            fed_metrics: outcome.fed_metrics.clone(),
        }],
        latency_ms: Some(outcome.latency_ms),
        accuracy: outcome.accuracy,
        chain_ok,
    };
    Ok(SingleRound {
        record,
        chain,
        pools,
        trace_csv: outcome.trace_csv,
        transcript_csv: outcome.transcript.map(|t| t.to_csv()),
        model,
    })
}

impl SingleRound {
    /// Writes trace, pools, transcript, fed and chain metrics, ledger and
    /// model files under `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut files: Vec<(&str, Vec<u8>)> = vec![
            ("chain_metrics.csv", chain_metrics_csv(std::slice::from_ref(&self.record)).into_bytes()),
            ("fed_metrics.csv", FedMetric::csv(&self.record.rounds[0].fed_metrics).into_bytes()),
            ("ledger.jsonl", self.chain.ledger.export().into_bytes()),
        ];
        if let Some(t) = &self.trace_csv {
            files.push(("trace.csv", t.clone().into_bytes()));
        }
        if let Some(p) = &self.pools {
            files.push(("pools.csv", p.to_csv().into_bytes()));
        }
        if let Some(t) = &self.transcript_csv {
            files.push(("transcript.csv", t.clone().into_bytes()));
        }
        if let Some(m) = &self.model {
            files.push(("model.bin", m.clone()));
        }
        let mut written = Vec::new();
        for (name, bytes) in files {
            let path = dir.join(name);
            std::fs::write(&path, bytes).map_err(io_err(&path))?;
            written.push(path);
        }
        Ok(written)
    }
}

