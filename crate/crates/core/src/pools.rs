//! Mining-pool formation.
//!
//! Nodes estimate pairwise latency from their observation history, a set of
//! head nodes announces itself, and the remaining nodes join pools one at a
//! time, each picking the pool with the lowest estimated time cost
//! `max(t_p, max_m l'(n, m))` over the pool's current members.
//!
//! Pool-time estimation (`t_p`) acts as the fourth step of the procedure: it
//! feeds the cost function but is otherwise independent of latency
//! estimation and head announcement.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netsim::{chunk_size_units, LatencyHistory, LatencyMatrix, Millis, NodeId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoolError {
    #[error("no latency history for pair ({i}, {j})")]
    InsufficientHistory { i: usize, j: usize },
    #[error("cannot form {pools} pools from {nodes} nodes")]
    TooManyPools { pools: usize, nodes: usize },
    #[error("pool count must be at least 1")]
    NoPools,
    #[error("node {0} is not part of the node set")]
    UnknownNode(usize),
    #[error("expected {expected} per-pool time estimates, got {got}")]
    PoolTimeCount { expected: usize, got: usize },
}

/// Estimated latencies `l'(i, j)` in milliseconds.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatedLatency {
    n: usize,
    data: Vec<Millis>,
}

impl EstimatedLatency {
    pub fn from_matrix(m: &LatencyMatrix) -> Self {
        let n = m.n();
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(m.get(NodeId(i), NodeId(j)));
            }
        }
        Self { n, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: NodeId, j: NodeId) -> Millis {
        self.data[i.0 * self.n + j.0]
    }

    /// Symmetrised distance used for head spreading.
    fn distance(&self, i: usize, j: usize) -> Millis {
        0.5 * (self.data[i * self.n + j] + self.data[j * self.n + i])
    }
}

fn mean(series: &[Millis]) -> Millis {
    series.iter().sum::<f64>() / series.len() as f64
}

/// Arithmetic mean of each pair's observation history.
pub fn estimate_latency(history: &LatencyHistory) -> Result<EstimatedLatency, PoolError> {
    let n = history.n();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let series = history.series(NodeId(i), NodeId(j));
            if series.is_empty() {
                return Err(PoolError::InsufficientHistory { i, j });
            }
            data[i * n + j] = mean(series);
        }
    }
    Ok(EstimatedLatency { n, data })
}

/// Like [`estimate_latency`], but pairs without history fall back to the
/// true link latency.
pub fn estimate_latency_or_bootstrap(history: &LatencyHistory, truth: &LatencyMatrix) -> EstimatedLatency {
    let n = history.n();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let series = history.series(NodeId(i), NodeId(j));
            data[i * n + j] = if series.is_empty() { truth.get(NodeId(i), NodeId(j)) } else { mean(series) };
        }
    }
    EstimatedLatency { n, data }
}

/// First-round history: one ping per link, the true latency scaled by
/// `U(0.9, 1.1)`.
pub fn bootstrap_history(truth: &LatencyMatrix, seed: u64) -> LatencyHistory {
    let mut history = LatencyHistory::new(truth.n());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    history
        .observe_all(truth, 0.9, 1.1, &mut rng)
        .expect("latency matrix entries are positive");
    history
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadPolicy {
    /// Seeded uniform sample of nodes.
    Random,
    /// Greedy farthest-point selection on estimated latency.
    #[default]
    Spread,
}

/// Announced pool heads, sorted by node id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadSet(Vec<NodeId>);

impl HeadSet {
    pub fn new(mut heads: Vec<NodeId>) -> Result<Self, PoolError> {
        if heads.is_empty() {
            return Err(PoolError::NoPools);
        }
        heads.sort();
        heads.dedup();
        Ok(Self(heads))
    }

    pub fn as_slice(&self) -> &[NodeId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn announce_heads(
    n_nodes: usize,
    pool_count: usize,
    policy: HeadPolicy,
    l_hat: &EstimatedLatency,
    seed: u64,
) -> Result<HeadSet, PoolError> {
    if pool_count == 0 {
        return Err(PoolError::NoPools);
    }
    if pool_count > n_nodes {
        return Err(PoolError::TooManyPools { pools: pool_count, nodes: n_nodes });
    }
    let heads = match policy {
        HeadPolicy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::index::sample(&mut rng, n_nodes, pool_count)
                .into_iter()
                .map(NodeId)
                .collect()
        }
        HeadPolicy::Spread => spread_heads(n_nodes, pool_count, l_hat),
    };
    HeadSet::new(heads)
}

fn spread_heads(n: usize, count: usize, l_hat: &EstimatedLatency) -> Vec<NodeId> {
    if count == n {
        return (0..n).map(NodeId).collect();
    }
    let mut chosen: Vec<usize> = Vec::with_capacity(count);
    if count == 1 {
        // 1-center: the node whose farthest peer is nearest.
        let eccentricity = |i: usize| (0..n).map(|j| l_hat.distance(i, j)).fold(0.0, f64::max);
        let best = (0..n)
            .min_by(|&a, &b| eccentricity(a).total_cmp(&eccentricity(b)).then(a.cmp(&b)))
            .expect("n >= 1");
        return vec![NodeId(best)];
    }
    let mut best = (0, 1, f64::NEG_INFINITY);
    for i in 0..n {
        for j in i + 1..n {
            let d = l_hat.distance(i, j);
            if d > best.2 {
                best = (i, j, d);
            }
        }
    }
    chosen.push(best.0);
    chosen.push(best.1);
    let mut in_set = vec![false; n];
    in_set[best.0] = true;
    in_set[best.1] = true;
    while chosen.len() < count {
        let mut pick = (usize::MAX, f64::NEG_INFINITY);
        for cand in (0..n).filter(|&c| !in_set[c]) {
            let d = chosen.iter().map(|&h| l_hat.distance(cand, h)).fold(f64::INFINITY, f64::min);
            if d > pick.1 {
                pick = (cand, d);
            }
        }
        in_set[pick.0] = true;
        chosen.push(pick.0);
    }
    chosen.into_iter().map(NodeId).collect()
}

/// Estimated time cost for `node` to join a pool: the larger of the pool's
/// training-time estimate and the worst estimated latency to any member.
pub fn pool_cost(node: NodeId, members: &[NodeId], t_p: Millis, l_hat: &EstimatedLatency) -> Millis {
    let worst_link = members
        .iter()
        .filter(|&&m| m != node)
        .map(|&m| l_hat.get(node, m))
        .fold(0.0, f64::max);
    t_p.max(worst_link)
}

/// Mean estimated latency over ordered member pairs; zero for singletons.
pub fn mean_intra_latency(members: &[NodeId], l_hat: &EstimatedLatency) -> Millis {
    let k = members.len();
    if k < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for &a in members {
        for &b in members {
            if a != b {
                total += l_hat.get(a, b);
            }
        }
    }
    total / (k * (k - 1)) as f64
}

/// A-priori duration of a pool's training:
/// `rounds_hint * (max compute + 2(|p|-1) * mean intra latency * size_units)`.
pub fn pool_time_estimate(
    members: &[NodeId],
    compute: &[Millis],
    l_hat: &EstimatedLatency,
    rounds_hint: u32,
    size_units: u32,
) -> Millis {
    let slowest = members.iter().map(|m| compute[m.0]).fold(0.0, f64::max);
    let hops = 2.0 * members.len().saturating_sub(1) as f64;
    let comm = hops * mean_intra_latency(members, l_hat) * f64::from(size_units);
    f64::from(rounds_hint) * (slowest + comm)
}

/// Inputs for estimating `t_p` from a pool's membership.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolTimeModel {
    pub compute: Vec<Millis>,
    pub rounds_hint: u32,
    pub model_len: usize,
    pub size_multiplier: f64,
}

impl PoolTimeModel {
    pub fn estimate(&self, members: &[NodeId], l_hat: &EstimatedLatency) -> Millis {
        let parts = members.len().max(1);
        let chunk = self.model_len.div_ceil(parts);
        let units = chunk_size_units(chunk, self.model_len, self.size_multiplier);
        pool_time_estimate(members, &self.compute, l_hat, self.rounds_hint, units)
    }
}

/// Source of `t_p` during assignment.
#[derive(Debug, Clone, PartialEq)]
pub enum PoolTime {
    /// One fixed estimate per head, in head order.
    Fixed(Vec<Millis>),
    /// Re-estimated for the pool as it would be if the joining node were
    /// admitted.
    Estimated(PoolTimeModel),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pool {
    pub head: NodeId,
    /// Members in join order; the head comes first.
    pub members: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolAssignment {
    pub pools: Vec<Pool>,
    /// Order in which non-head nodes were processed.
    pub join_order: Vec<NodeId>,
}

impl PoolAssignment {
    pub fn pool_count(&self) -> usize {
        self.pools.len()
    }

    pub fn pool_of(&self, node: NodeId) -> Option<usize> {
        self.pools.iter().position(|p| p.members.contains(&node))
    }

    /// `node_id,pool_id,is_head` rows sorted by node id.
    pub fn to_csv(&self) -> String {
        let mut rows: Vec<(usize, usize, bool)> = self
            .pools
            .iter()
            .enumerate()
            .flat_map(|(pid, p)| p.members.iter().map(move |m| (m.0, pid, *m == p.head)))
            .collect();
        rows.sort();
        let mut out = String::from("node_id,pool_id,is_head\n");
        for (node, pool, head) in rows {
            let _ = writeln!(out, "{node},{pool},{head}");
        }
        out
    }
}

/// Sequential greedy join: non-head nodes are visited in a seeded random
/// order and each joins the pool with the lowest [`pool_cost`] given the
/// memberships at that moment. Ties go to the lower head id.
pub fn assign_pools(
    n_nodes: usize,
    heads: &HeadSet,
    l_hat: &EstimatedLatency,
    t_p: &PoolTime,
    order_seed: u64,
) -> Result<PoolAssignment, PoolError> {
    if heads.len() > n_nodes {
        return Err(PoolError::TooManyPools { pools: heads.len(), nodes: n_nodes });
    }
    if let Some(h) = heads.as_slice().iter().find(|h| h.0 >= n_nodes) {
        return Err(PoolError::UnknownNode(h.0));
    }
    if let PoolTime::Fixed(v) = t_p {
        if v.len() != heads.len() {
            return Err(PoolError::PoolTimeCount { expected: heads.len(), got: v.len() });
        }
    }
    let mut pools: Vec<Pool> = heads.as_slice().iter().map(|&h| Pool { head: h, members: vec![h] }).collect();
    let mut order: Vec<NodeId> = (0..n_nodes).map(NodeId).filter(|n| !heads.as_slice().contains(n)).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(order_seed));

    let mut scratch = Vec::new();
    for &node in &order {
        let mut best = (0, f64::INFINITY);
        for (q, pool) in pools.iter().enumerate() {
            let tq = match t_p {
                PoolTime::Fixed(v) => v[q],
                PoolTime::Estimated(model) => {
                    scratch.clear();
                    scratch.extend_from_slice(&pool.members);
                    scratch.push(node);
                    model.estimate(&scratch, l_hat)
                }
            };
            let cost = pool_cost(node, &pool.members, tq, l_hat);
            if cost < best.1 {
                best = (q, cost);
            }
        }
        pools[best.0].members.push(node);
    }
    Ok(PoolAssignment { pools, join_order: order })
}
