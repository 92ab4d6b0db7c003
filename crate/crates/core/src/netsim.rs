//! Deterministic discrete-event network simulator.
//!
//! Nodes exchange messages over directed links whose one-way latency comes
//! from a [`LatencyMatrix`]. A message's transmission time is the base link
//! latency multiplied by its `size_units`. Events are delivered in
//! `(deliver_time, seq)` order, so two runs with the same inputs produce the
//! same trace bit for bit.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulated milliseconds.
pub type Millis = f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetsimError {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("node {0} not found")]
    NodeNotFound(usize),
    #[error("node {0} cannot send a message to itself")]
    SelfSend(usize),
    #[error("invalid latency observation {observed} for pair ({i}, {j})")]
    InvalidObservation { i: usize, j: usize, observed: f64 },
    #[error("event scheduled at {at} ms but the clock is already at {now} ms")]
    TimeTravel { at: Millis, now: Millis },
}

/// Dense directed matrix of one-way link latencies in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyMatrix {
    n: usize,
    data: Vec<Millis>,
}

impl LatencyMatrix {
    /// Builds a matrix from row-major entries. The diagonal must be zero and
    /// every off-diagonal entry strictly positive and finite.
    pub fn from_rows(rows: Vec<Vec<Millis>>) -> Result<Self, NetsimError> {
        let n = rows.len();
        if n < 2 {
            return Err(NetsimError::InvalidTopology(format!("need at least 2 nodes, got {n}")));
        }
        let mut data = Vec::with_capacity(n * n);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != n {
                return Err(NetsimError::InvalidTopology(format!(
                    "row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            for (j, v) in row.into_iter().enumerate() {
                let ok = if i == j { v == 0.0 } else { v.is_finite() && v > 0.0 };
                if !ok {
                    return Err(NetsimError::InvalidTopology(format!("bad latency {v} at ({i}, {j})")));
                }
                data.push(v);
            }
        }
        Ok(Self { n, data })
    }

    /// Same latency on every link.
    pub fn constant(n: usize, latency: Millis) -> Result<Self, NetsimError> {
        Self::from_rows(
            (0..n)
                .map(|i| (0..n).map(|j| if i == j { 0.0 } else { latency }).collect())
                .collect(),
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: NodeId, j: NodeId) -> Millis {
        self.data[i.0 * self.n + j.0]
    }

    pub fn contains(&self, node: NodeId) -> bool {
        node.0 < self.n
    }

    pub fn max_latency(&self) -> Millis {
        self.data.iter().copied().fold(0.0, f64::max)
    }
}

/// Latency generator used by [`build_topology`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TopologyModel {
    /// Every directed link drawn independently from `U(lo, hi)`.
    Uniform { lo: Millis, hi: Millis },
    /// Nodes are placed in `clusters` groups (node `i` belongs to cluster
    /// `i % clusters`); intra-cluster links draw from `U(intra_lo, intra_hi)`,
    /// inter-cluster links from `U(inter_lo, inter_hi)`.
    Clustered {
        clusters: usize,
        intra_lo: Millis,
        intra_hi: Millis,
        inter_lo: Millis,
        inter_hi: Millis,
    },
}

impl TopologyModel {
    /// Cluster label of a node; uniform topologies have a single cluster.
    pub fn cluster_of(&self, node: NodeId) -> usize {
        match self {
            TopologyModel::Uniform { .. } => 0,
            TopologyModel::Clustered { clusters, .. } => node.0 % clusters,
        }
    }

    fn validate(&self) -> Result<(), NetsimError> {
        let range_ok = |lo: f64, hi: f64| lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi;
        let ok = match *self {
            TopologyModel::Uniform { lo, hi } => range_ok(lo, hi),
            TopologyModel::Clustered { clusters, intra_lo, intra_hi, inter_lo, inter_hi } => {
                clusters >= 1 && range_ok(intra_lo, intra_hi) && range_ok(inter_lo, inter_hi)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(NetsimError::InvalidTopology(format!("bad latency ranges in {self:?}")))
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Generates a directed latency matrix, deterministic in `(n_nodes, seed, model)`.
pub fn build_topology(n_nodes: usize, seed: u64, model: &TopologyModel) -> Result<LatencyMatrix, NetsimError> {
    if n_nodes < 2 {
        return Err(NetsimError::InvalidTopology(format!("need at least 2 nodes, got {n_nodes}")));
    }
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; n_nodes * n_nodes];
    for i in 0..n_nodes {
        for j in 0..n_nodes {
            if i == j {
                continue;
            }
            data[i * n_nodes + j] = match *model {
                TopologyModel::Uniform { lo, hi } => draw(&mut rng, lo, hi),
                TopologyModel::Clustered { intra_lo, intra_hi, inter_lo, inter_hi, .. } => {
                    if model.cluster_of(NodeId(i)) == model.cluster_of(NodeId(j)) {
                        draw(&mut rng, intra_lo, intra_hi)
                    } else {
                        draw(&mut rng, inter_lo, inter_hi)
                    }
                }
            };
        }
    }
    Ok(LatencyMatrix { n: n_nodes, data })
}

/// Per-node compute time for one local training pass, drawn once from
/// `U(lo, hi)`.
pub fn draw_compute_times(n_nodes: usize, lo: Millis, hi: Millis, seed: u64) -> Vec<Millis> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_nodes).map(|_| draw(&mut rng, lo, hi)).collect()
}

/// Size multiplier for a weight chunk of `chunk_len` out of a model of
/// `model_len` parameters: `max(1, round(chunk_len * multiplier / model_len))`.
pub fn chunk_size_units(chunk_len: usize, model_len: usize, multiplier: f64) -> u32 {
    if model_len == 0 {
        return 1;
    }
    let units = (chunk_len as f64 * multiplier / model_len as f64).round();
    (units as u32).max(1)
}

/// Append-only record of observed pairwise latencies.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyHistory {
    n: usize,
    series: Vec<Vec<Millis>>,
}

impl LatencyHistory {
    pub fn new(n: usize) -> Self {
        Self { n, series: vec![Vec::new(); n * n] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn record(&mut self, i: NodeId, j: NodeId, observed: Millis) -> Result<(), NetsimError> {
        for node in [i, j] {
            if node.0 >= self.n {
                return Err(NetsimError::NodeNotFound(node.0));
            }
        }
        if i == j || !observed.is_finite() || observed <= 0.0 {
            return Err(NetsimError::InvalidObservation { i: i.0, j: j.0, observed });
        }
        self.series[i.0 * self.n + j.0].push(observed);
        Ok(())
    }

    pub fn series(&self, i: NodeId, j: NodeId) -> &[Millis] {
        &self.series[i.0 * self.n + j.0]
    }

    /// Records one noisy observation of every directed link: the true
    /// latency scaled by `U(noise_lo, noise_hi)`.
    pub fn observe_all(
        &mut self,
        truth: &LatencyMatrix,
        noise_lo: f64,
        noise_hi: f64,
        rng: &mut impl Rng,
    ) -> Result<(), NetsimError> {
        for i in 0..self.n {
            for j in 0..self.n {
                if i == j {
                    continue;
                }
                let factor = if noise_lo == noise_hi { noise_lo } else { rng.gen_range(noise_lo..noise_hi) };
                self.record(NodeId(i), NodeId(j), truth.get(NodeId(i), NodeId(j)) * factor)?;
            }
        }
        Ok(())
    }
}

/// Implemented by simulator payloads so that traces can name them.
pub trait Payload {
    fn kind(&self) -> &'static str;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event<P> {
    pub send_time: Millis,
    pub deliver_time: Millis,
    pub src: NodeId,
    pub dst: NodeId,
    pub size_units: u32,
    pub seq: u64,
    pub payload: P,
}

impl<P> PartialEq for Queued<P> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<P> Eq for Queued<P> {}
impl<P> PartialOrd for Queued<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<P> Ord for Queued<P> {
    // BinaryHeap is a max-heap; invert so the earliest (time, seq) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .deliver_time
            .total_cmp(&self.0.deliver_time)
            .then_with(|| other.0.seq.cmp(&self.0.seq))
    }
}

struct Queued<P>(Event<P>);

/// One delivered event as written to a trace dump.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub time: Millis,
    pub src: NodeId,
    pub dst: NodeId,
    pub kind: &'static str,
    pub size_units: u32,
}

/// Where an enqueued event will land.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scheduled {
    pub deliver_time: Millis,
    pub seq: u64,
}

pub struct Simulator<P> {
    latency: LatencyMatrix,
    now: Millis,
    next_seq: u64,
    queue: BinaryHeap<Queued<P>>,
    trace: Option<Vec<TraceRecord>>,
    sent: u64,
    delivered: u64,
}

impl<P: Payload> Simulator<P> {
    pub fn new(latency: LatencyMatrix) -> Self {
        Self {
            latency,
            now: 0.0,
            next_seq: 0,
            queue: BinaryHeap::new(),
            trace: None,
            sent: 0,
            delivered: 0,
        }
    }

    /// Keeps a record of every delivered event.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn now(&self) -> Millis {
        self.now
    }

    pub fn latency(&self) -> &LatencyMatrix {
        &self.latency
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn sent_count(&self) -> u64 {
        self.sent
    }

    pub fn delivered_count(&self) -> u64 {
        self.delivered
    }

    fn check_node(&self, node: NodeId) -> Result<(), NetsimError> {
        if self.latency.contains(node) {
            Ok(())
        } else {
            Err(NetsimError::NodeNotFound(node.0))
        }
    }

    fn enqueue(&mut self, src: NodeId, dst: NodeId, at: Millis, size_units: u32, payload: P) -> Scheduled {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.sent += 1;
        self.queue.push(Queued(Event {
            send_time: self.now,
            deliver_time: at,
            src,
            dst,
            size_units,
            seq,
            payload,
        }));
        Scheduled { deliver_time: at, seq }
    }

    /// Sends a message over the `src -> dst` link; it arrives after
    /// `latency[src][dst] * size_units` milliseconds.
    pub fn send(&mut self, src: NodeId, dst: NodeId, payload: P, size_units: u32) -> Result<Scheduled, NetsimError> {
        self.check_node(src)?;
        self.check_node(dst)?;
        if src == dst {
            return Err(NetsimError::SelfSend(src.0));
        }
        let at = self.now + self.latency.get(src, dst) * f64::from(size_units);
        Ok(self.enqueue(src, dst, at, size_units, payload))
    }

    /// Local timer: `node` receives `payload` from itself after `delay` ms.
    pub fn timer(&mut self, node: NodeId, delay: Millis, payload: P) -> Result<Scheduled, NetsimError> {
        self.schedule_at(node, self.now + delay, payload)
    }

    /// Local timer at an absolute time, which must not lie in the past.
    pub fn schedule_at(&mut self, node: NodeId, at: Millis, payload: P) -> Result<Scheduled, NetsimError> {
        self.check_node(node)?;
        if !(at >= self.now) {
            return Err(NetsimError::TimeTravel { at, now: self.now });
        }
        Ok(self.enqueue(node, node, at, 0, payload))
    }

    /// Pops the next event and advances the clock to its delivery time.
    pub fn pop(&mut self) -> Result<Option<Event<P>>, NetsimError> {
        let Some(Queued(event)) = self.queue.pop() else {
            return Ok(None);
        };
        if event.deliver_time < self.now {
            return Err(NetsimError::TimeTravel { at: event.deliver_time, now: self.now });
        }
        self.now = event.deliver_time;
        self.delivered += 1;
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceRecord {
                time: event.deliver_time,
                src: event.src,
                dst: event.dst,
                kind: event.payload.kind(),
                size_units: event.size_units,
            });
        }
        Ok(Some(event))
    }

    /// Delivers events to `handler` until the queue is empty and returns the
    /// final clock value. The handler may enqueue further events.
    pub fn run_until_idle<E, F>(&mut self, mut handler: F) -> Result<Millis, E>
    where
        E: From<NetsimError>,
        F: FnMut(&mut Self, Event<P>) -> Result<(), E>,
    {
        while let Some(event) = self.pop()? {
            handler(self, event)?;
        }
        Ok(self.now)
    }

    pub fn trace(&self) -> Option<&[TraceRecord]> {
        self.trace.as_deref()
    }

    /// Trace as `time,src,dst,kind,size_units` lines.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("time,src,dst,kind,size_units\n");
        for r in self.trace.iter().flatten() {
            let _ = writeln!(out, "{},{},{},{},{}", r.time, r.src, r.dst, r.kind, r.size_units);
        }
        out
    }
}
