//! Blockchain state machine: task publication, mining rounds for FedChain
//! and the baselines, verification-gated block production and reward
//! settlement.
//!
//! Rounds run one task at a time on the simulator's total order, so there
//! are no forks to resolve.

mod ledger;
mod sim;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ledger::{
    challenge_seed, validate_chain, Block, BlockHeader, ChainReport, Ledger, LedgerRecord, TaskSummary, Transaction,
    TxKind, TxPayload, Violation, ViolationKind, ZERO_HASH,
};
pub(crate) use sim::derive_seed;
pub use sim::{pow_digest, pow_meets_difficulty, FedMetric, Fault, Network, RoundOutcome, RoundParams};

use crate::fed::{Architecture, Dataset, FedError, LabelHistogram};
use crate::netsim::{Millis, NetsimError, NodeId};
use crate::pools::PoolError;
use crate::sharedring::RingError;
use crate::verify::VerifyError;

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("unknown task {0}")]
    UnknownTask(u64),
    #[error("task {task} failed: {reason}")]
    RoundFailed { task: u64, reason: String },
    #[error("invalid round parameters: {0}")]
    InvalidParams(String),
    #[error("ledger parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Netsim(#[from] NetsimError),
    #[error(transparent)]
    Ring(#[from] RingError),
    #[error(transparent)]
    Fed(#[from] FedError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Pools(#[from] PoolError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsensusMode {
    Fedchain,
    FedavgCentral,
    Pow,
    GflRing,
}

impl ConsensusMode {
    pub const ALL: [ConsensusMode; 4] =
        [ConsensusMode::Fedchain, ConsensusMode::FedavgCentral, ConsensusMode::Pow, ConsensusMode::GflRing];

    pub fn as_str(&self) -> &'static str {
        match self {
            ConsensusMode::Fedchain => "fedchain",
            ConsensusMode::FedavgCentral => "fedavg_central",
            ConsensusMode::Pow => "pow",
            ConsensusMode::GflRing => "gfl_ring",
        }
    }
}

impl std::fmt::Display for ConsensusMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ConsensusMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ConsensusMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode {s:?}; expected one of fedchain, fedavg_central, pow, gfl_ring"))
    }
}

/// A learning task as published by its owner.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub id: u64,
    pub arch: Architecture,
    /// Publisher's example dataset; its label histogram is the KL reference
    /// and pools evaluate on it.
    pub example: Dataset,
    /// Held-out set the verifiers draw challenges from.
    pub held_out: Dataset,
    pub target: f64,
    pub deadline_ms: Millis,
    pub reward: u64,
    pub challenge_k: usize,
}

impl Task {
    pub fn reference(&self) -> LabelHistogram {
        self.example.histogram()
    }

    pub fn summary(&self) -> TaskSummary {
        TaskSummary {
            id: self.id,
            arch: self.arch,
            reference_histogram: self.reference().freq().to_vec(),
            target: self.target,
            deadline_ms: self.deadline_ms,
            reward: self.reward,
            challenge_k: self.challenge_k,
        }
    }

    fn validate(&self, now: Millis) -> Result<(), ChainError> {
        let bad = |m: String| Err(ChainError::InvalidTask(m));
        if !(self.target > 0.0 && self.target <= 1.0) {
            return bad(format!("target {} outside (0, 1]", self.target));
        }
        if !(self.deadline_ms > now) {
            return bad(format!("deadline {} is not after publish time {now}", self.deadline_ms));
        }
        if self.example.is_empty() || self.held_out.len() < self.challenge_k || self.challenge_k == 0 {
            return bad("example set empty or held-out set smaller than the challenge".into());
        }
        if self.example.n_features() != self.arch.features() || self.example.n_classes() != self.arch.classes() {
            return bad("example dataset does not match the architecture".into());
        }
        Ok(())
    }
}

/// Largest-remainder split of `amount` proportional to `weights`; ties go
/// to the lower index. The parts always sum to `amount`.
pub fn split_reward(amount: u64, weights: &[f64]) -> Vec<u64> {
    if weights.is_empty() {
        return Vec::new();
    }
    let total: f64 = weights.iter().map(|w| w.max(0.0)).sum();
    let shares: Vec<f64> = if total > 0.0 {
        weights.iter().map(|w| w.max(0.0) / total * amount as f64).collect()
    } else {
        vec![amount as f64 / weights.len() as f64; weights.len()]
    };
    let mut out: Vec<u64> = shares.iter().map(|s| s.floor() as u64).collect();
    let assigned: u64 = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (shares[b] - shares[b].floor()).total_cmp(&(shares[a] - shares[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle().take(amount.saturating_sub(assigned) as usize) {
        out[i] += 1;
    }
    out
}

/// Chain state mutated by the event loop: ledger, task queue, escrowed
/// rewards and balances.
#[derive(Debug, Clone, Default)]
pub struct Chain {
    pub ledger: Ledger,
    tasks: BTreeMap<u64, (Task, Transaction)>,
    escrow: BTreeMap<u64, u64>,
    balances: BTreeMap<NodeId, u64>,
    settled: BTreeSet<u64>,
    pending: Vec<Transaction>,
    /// Winning pool, its members and their final-round weights, per task.
    winners: BTreeMap<u64, (usize, Vec<NodeId>, Vec<f64>)>,
}

impl Chain {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> Millis {
        self.ledger.tip_time()
    }

    pub fn balance(&self, node: NodeId) -> u64 {
        self.balances.get(&node).copied().unwrap_or(0)
    }

    pub fn balances(&self) -> &BTreeMap<NodeId, u64> {
        &self.balances
    }

    pub fn escrowed(&self) -> u64 {
        self.escrow.values().sum()
    }

    /// Balances plus rewards still held in escrow.
    pub fn total_value(&self) -> u64 {
        self.balances.values().sum::<u64>() + self.escrowed()
    }

    pub fn task(&self, id: u64) -> Option<&Task> {
        self.tasks.get(&id).map(|(t, _)| t)
    }

    /// Validates and queues a task, escrowing its reward.
    pub fn publish_task(&mut self, publisher: NodeId, task: Task) -> Result<Transaction, ChainError> {
        task.validate(self.now())?;
        if self.tasks.contains_key(&task.id) || self.ledger.blocks.iter().any(|b| b.header.task_id == Some(task.id)) {
            return Err(ChainError::InvalidTask(format!("task id {} already used", task.id)));
        }
        let tx = Transaction {
            task_id: task.id,
            author: publisher,
            time_ms: self.now(),
            payload: TxPayload::TaskPublish { task: task.summary() },
        };
        self.escrow.insert(task.id, task.reward);
        self.tasks.insert(task.id, (task, tx.clone()));
        Ok(tx)
    }

    /// Lowest queued task id without a block yet.
    pub fn next_task(&self) -> Option<u64> {
        self.tasks
            .keys()
            .copied()
            .find(|id| !self.ledger.blocks.iter().any(|b| b.header.task_id == Some(*id)))
    }

    pub fn run_round_fedchain(
        &mut self,
        task_id: u64,
        net: &Network,
        pools: &crate::pools::PoolAssignment,
        params: &RoundParams,
    ) -> Result<RoundOutcome, ChainError> {
        self.run_round(task_id, ConsensusMode::Fedchain, net, Some(pools), params)
    }

    pub fn run_round_baseline(
        &mut self,
        task_id: u64,
        mode: ConsensusMode,
        net: &Network,
        params: &RoundParams,
    ) -> Result<RoundOutcome, ChainError> {
        if mode == ConsensusMode::Fedchain {
            return Err(ChainError::InvalidParams("fedchain rounds need a pool assignment".into()));
        }
        self.run_round(task_id, mode, net, None, params)
    }

    /// Credits the task reward to the winning pool's members in proportion
    /// to their final aggregation weights. Settling twice is a no-op that
    /// returns `false`.
    pub fn settle_reward(&mut self, task_id: u64) -> Result<bool, ChainError> {
        if self.settled.contains(&task_id) {
            return Ok(false);
        }
        let (pool, members, weights) = self
            .winners
            .get(&task_id)
            .cloned()
            .ok_or_else(|| ChainError::InvalidTask(format!("task {task_id} has no accepted block")))?;
        let reward = self.escrow.remove(&task_id).ok_or(ChainError::UnknownTask(task_id))?;
        let parts = split_reward(reward, &weights);
        for (m, &c) in members.iter().zip(&parts) {
            *self.balances.entry(*m).or_insert(0) += c;
        }
        self.settled.insert(task_id);
        self.pending.push(Transaction {
            task_id,
            author: members[0],
            time_ms: self.now(),
            payload: TxPayload::RewardSettle { pool, credits: members.iter().copied().zip(parts).collect() },
        });
        Ok(true)
    }

    /// Writes queued settlement transactions into a block of their own.
    pub fn flush_settlements(&mut self) -> Option<&Block> {
        if self.pending.is_empty() {
            return None;
        }
        let txs = std::mem::take(&mut self.pending);
        let t = self.now();
        Some(self.ledger.append(t, None, None, None, txs))
    }
}
