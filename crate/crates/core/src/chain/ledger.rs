//! Blocks, transactions, the append-only ledger and its validator.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ChainError;
use crate::fed::Architecture;
use crate::netsim::{Millis, NodeId};

pub const ZERO_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";

/// Transaction kinds in the order they must appear for a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxKind {
    TaskPublish,
    PoolRegister,
    ModelCommit,
    ProofSubmit,
    VerifyVote,
    RewardSettle,
}

/// Public part of a task as recorded on chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub id: u64,
    pub arch: Architecture,
    pub reference_histogram: Vec<f64>,
    pub target: f64,
    pub deadline_ms: Millis,
    pub reward: u64,
    pub challenge_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TxPayload {
    TaskPublish { task: TaskSummary },
    PoolRegister { pool: usize, head: NodeId, members: Vec<NodeId> },
    ModelCommit { pool: usize, commitment: String },
    ProofSubmit { pool: usize, commitment: String, challenge_seed: String, proof_digest: String, claimed_accuracy: Option<f64> },
    VerifyVote { pool: usize, accepted: bool, measured_accuracy: Option<f64> },
    RewardSettle { pool: usize, credits: Vec<(NodeId, u64)> },
}

impl TxPayload {
    pub fn kind(&self) -> TxKind {
        match self {
            TxPayload::TaskPublish { .. } => TxKind::TaskPublish,
            TxPayload::PoolRegister { .. } => TxKind::PoolRegister,
            TxPayload::ModelCommit { .. } => TxKind::ModelCommit,
            TxPayload::ProofSubmit { .. } => TxKind::ProofSubmit,
            TxPayload::VerifyVote { .. } => TxKind::VerifyVote,
            TxPayload::RewardSettle { .. } => TxKind::RewardSettle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transaction {
    pub task_id: u64,
    pub author: NodeId,
    pub time_ms: Millis,
    pub payload: TxPayload,
}

impl Transaction {
    pub fn kind(&self) -> TxKind {
        self.payload.kind()
    }

    pub fn hash(&self) -> String {
        sha256_json(self)
    }
}

fn sha256_json<T: Serialize>(v: &T) -> String {
    let bytes = serde_json::to_vec(v).expect("ledger records serialise");
    hex::encode(Sha256::digest(&bytes))
}

/// Seed for the verifiers' challenge draw: `H(prev_hash | commit tx hash)`.
/// The commitment must exist before the seed can be computed.
pub fn challenge_seed(prev_hash: &str, commit_tx: &Transaction) -> String {
    let mut h = Sha256::new();
    h.update(prev_hash.as_bytes());
    h.update(commit_tx.hash().as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockHeader {
    pub height: u64,
    pub prev_hash: String,
    pub timestamp_ms: Millis,
    /// Head of the winning pool; absent for settlement blocks.
    pub proposer: Option<NodeId>,
    pub task_id: Option<u64>,
    pub commitment: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub header: BlockHeader,
    pub transactions: Vec<Transaction>,
    pub hash: String,
}

impl Block {
    pub fn compute_hash(header: &BlockHeader, transactions: &[Transaction]) -> String {
        sha256_json(&(header, transactions))
    }
}

/// One line of the ledger export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LedgerRecord {
    Block {
        #[serde(flatten)]
        header: BlockHeader,
        hash: String,
        tx_count: usize,
    },
    Tx {
        height: u64,
        index: usize,
        #[serde(flatten)]
        tx: Transaction,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ledger {
    pub blocks: Vec<Block>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn height(&self) -> u64 {
        self.blocks.len() as u64
    }

    pub fn tip_hash(&self) -> &str {
        self.blocks.last().map(|b| b.hash.as_str()).unwrap_or(ZERO_HASH)
    }

    pub fn tip_time(&self) -> Millis {
        self.blocks.last().map(|b| b.header.timestamp_ms).unwrap_or(0.0)
    }

    /// Links and hashes a new block on top of the tip.
    pub fn append(
        &mut self,
        timestamp_ms: Millis,
        proposer: Option<NodeId>,
        task_id: Option<u64>,
        commitment: Option<String>,
        transactions: Vec<Transaction>,
    ) -> &Block {
        let header = BlockHeader {
            height: self.height(),
            prev_hash: self.tip_hash().to_string(),
            timestamp_ms,
            proposer,
            task_id,
            commitment,
        };
        let hash = Block::compute_hash(&header, &transactions);
        self.blocks.push(Block { header, transactions, hash });
        self.blocks.last().expect("just pushed")
    }

    /// Line-delimited JSON: each block record is followed by its
    /// transactions.
    pub fn export(&self) -> String {
        let mut out = String::new();
        for b in &self.blocks {
            let rec = LedgerRecord::Block { header: b.header.clone(), hash: b.hash.clone(), tx_count: b.transactions.len() };
            let _ = writeln!(out, "{}", serde_json::to_string(&rec).expect("serialise"));
            for (index, tx) in b.transactions.iter().enumerate() {
                let rec = LedgerRecord::Tx { height: b.header.height, index, tx: tx.clone() };
                let _ = writeln!(out, "{}", serde_json::to_string(&rec).expect("serialise"));
            }
        }
        out
    }

    pub fn import(text: &str) -> Result<Self, ChainError> {
        let mut blocks: Vec<Block> = Vec::new();
        let mut expected = 0usize;
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: LedgerRecord =
                serde_json::from_str(line).map_err(|e| ChainError::Parse(format!("line {}: {e}", n + 1)))?;
            match rec {
                LedgerRecord::Block { header, hash, tx_count } => {
                    if expected != 0 {
                        return Err(ChainError::Parse(format!("line {}: block before previous block's transactions", n + 1)));
                    }
                    expected = tx_count;
                    blocks.push(Block { header, transactions: Vec::with_capacity(tx_count), hash });
                }
                LedgerRecord::Tx { height, tx, .. } => {
                    let b = blocks
                        .last_mut()
                        .filter(|b| b.header.height == height && expected > 0)
                        .ok_or_else(|| ChainError::Parse(format!("line {}: orphan transaction", n + 1)))?;
                    b.transactions.push(tx);
                    expected -= 1;
                }
            }
        }
        if expected != 0 {
            return Err(ChainError::Parse("truncated ledger".into()));
        }
        Ok(Self { blocks })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    HashMismatch,
    HashLink,
    Height,
    Timestamp,
    TxOrder,
    CommitBeforeChallenge,
    DuplicateTaskBlock,
    Commitment,
    RewardConservation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub height: u64,
    pub kind: ViolationKind,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChainReport {
    pub blocks: usize,
    pub transactions: usize,
    pub violations: Vec<Violation>,
}

impl ChainReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks hash links, heights, timestamps, per-task transaction order,
/// commit-then-challenge ordering, one block per task and reward totals.
pub fn validate_chain(ledger: &Ledger) -> ChainReport {
    let mut report = ChainReport { blocks: ledger.blocks.len(), ..Default::default() };
    let mut flag = |height: u64, kind: ViolationKind, detail: String| {
        report.violations.push(Violation { height, kind, detail });
    };
    let mut prev_hash = ZERO_HASH.to_string();
    let mut prev_time = f64::NEG_INFINITY;
    let mut last_kind: BTreeMap<u64, TxKind> = BTreeMap::new();
    let mut rewards: BTreeMap<u64, u64> = BTreeMap::new();
    let mut task_blocks: BTreeSet<u64> = BTreeSet::new();
    // (task, pool) -> commitment and challenge seed it implies
    let mut commits: BTreeMap<(u64, usize), (String, String)> = BTreeMap::new();
    let mut tx_count = 0;

    for (i, b) in ledger.blocks.iter().enumerate() {
        let h = b.header.height;
        tx_count += b.transactions.len();
        if h != i as u64 {
            flag(h, ViolationKind::Height, format!("block {i} claims height {h}"));
        }
        if Block::compute_hash(&b.header, &b.transactions) != b.hash {
            flag(h, ViolationKind::HashMismatch, "stored hash does not match contents".into());
        }
        if b.header.prev_hash != prev_hash {
            flag(h, ViolationKind::HashLink, format!("prev_hash {} != {}", b.header.prev_hash, prev_hash));
        }
        if b.header.timestamp_ms < prev_time {
            flag(h, ViolationKind::Timestamp, "timestamp decreases".into());
        }
        if let Some(task) = b.header.task_id {
            if !task_blocks.insert(task) {
                flag(h, ViolationKind::DuplicateTaskBlock, format!("second block for task {task}"));
            }
        }
        for tx in &b.transactions {
            let kind = tx.kind();
            if tx.time_ms > b.header.timestamp_ms {
                flag(h, ViolationKind::Timestamp, format!("{kind:?} stamped after its block"));
            }
            match last_kind.get(&tx.task_id) {
                None if kind != TxKind::TaskPublish => {
                    flag(h, ViolationKind::TxOrder, format!("task {} starts with {kind:?}", tx.task_id))
                }
                Some(&prev) if kind < prev || (kind == TxKind::TaskPublish) || (kind == TxKind::RewardSettle && prev == kind) => {
                    flag(h, ViolationKind::TxOrder, format!("task {}: {kind:?} after {prev:?}", tx.task_id))
                }
                _ => {}
            }
            last_kind.insert(tx.task_id, kind);
            match &tx.payload {
                TxPayload::TaskPublish { task } => {
                    rewards.insert(task.id, task.reward);
                }
                TxPayload::ModelCommit { pool, commitment } => {
                    commits.insert((tx.task_id, *pool), (commitment.clone(), challenge_seed(&b.header.prev_hash, tx)));
                }
                TxPayload::ProofSubmit { pool, commitment, challenge_seed: seed, .. } => {
                    match commits.get(&(tx.task_id, *pool)) {
                        None => flag(h, ViolationKind::CommitBeforeChallenge, format!("proof for pool {pool} without commitment")),
                        Some((c, s)) => {
                            if c != commitment {
                                flag(h, ViolationKind::Commitment, format!("proof for pool {pool} names another commitment"));
                            }
                            if s != seed {
                                flag(h, ViolationKind::CommitBeforeChallenge, format!("challenge seed for pool {pool} not derived from its commitment"));
                            }
                        }
                    }
                }
                TxPayload::VerifyVote { pool, accepted, .. } => {
                    let committed = commits.get(&(tx.task_id, *pool)).map(|(c, _)| c);
                    if *accepted && b.header.commitment.as_ref() != committed {
                        flag(h, ViolationKind::Commitment, format!("accepted pool {pool} does not match block commitment"));
                    }
                }
                TxPayload::RewardSettle { credits, .. } => {
                    let total: u64 = credits.iter().map(|(_, c)| c).sum();
                    if rewards.get(&tx.task_id) != Some(&total) {
                        flag(h, ViolationKind::RewardConservation, format!("task {} credits {total}", tx.task_id));
                    }
                }
                TxPayload::PoolRegister { .. } => {}
            }
        }
        prev_hash = b.hash.clone();
        prev_time = b.header.timestamp_ms;
    }
    report.transactions = tx_count;
    report
}
