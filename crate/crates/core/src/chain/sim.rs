//! Event-driven mining rounds for every consensus mode.
//!
//! FedChain pools and the GFL ring run the same loop: local training timer,
//! ring all-reduce step messages between ring neighbours, aggregation, and
//! evaluation by the head. The FedAvg coordinator serialises its ingress and
//! egress. PoW nodes hash round-robin until one meets the difficulty. In
//! every mode the first proof the publisher verifies wins.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{challenge_seed, Chain, ChainError, ConsensusMode, Task, Transaction, TxPayload};
use crate::fed::{
    aggregate, average_from_scaled_sum, compute_weights, evaluate, local_loss, local_train, prescale_factor,
    AggregationScheme, Dataset, Model, TrainConfig,
};
use crate::netsim::{chunk_size_units, Event, LatencyMatrix, Millis, NodeId, Payload, Simulator};
use crate::pools::PoolAssignment;
use crate::sharedring::{
    chunk_bounds, from_fixed, plain_all_reduce, plain_ring_steps, plain_slot_sent, secret_all_reduce,
    secret_ring_steps, secret_slot_sent, to_fixed, RingConfig, Transcript,
};
use crate::verify::{
    accuracy_claim_check_with_min, commit, draw_challenge, keygen, prove, quantize, verify, Blinding, ModelCommitment,
    PublicParams, K_MIN,
};

/// Everything the simulator needs to know about the nodes.
#[derive(Debug, Clone)]
pub struct Network {
    pub latency: LatencyMatrix,
    /// Duration of one local training pass per node.
    pub compute: Vec<Millis>,
    /// Local dataset per node.
    pub data: Vec<Dataset>,
}

impl Network {
    pub fn n(&self) -> usize {
        self.latency.n()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Flip one prediction in the first proof the publisher receives.
    TamperFirstProof,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoundParams {
    pub train: TrainConfig,
    pub scheme: AggregationScheme,
    pub ring: RingConfig,
    /// Size in units of a full model message.
    pub size_multiplier: f64,
    pub verify_ms: Millis,
    /// FL rounds a pool may run before giving up.
    pub max_rounds: u32,
    /// Coordinator occupancy per received or sent unit (fedavg_central).
    pub ingress_ms_per_unit: Millis,
    pub pow_difficulty_bits: u32,
    pub pow_trial_ms: Millis,
    pub lambda: u16,
    pub seed: u64,
    pub publisher: NodeId,
    pub coordinator: NodeId,
    pub trace: bool,
    pub fault: Option<Fault>,
}

impl Default for RoundParams {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            scheme: AggregationScheme::Kl,
            ring: RingConfig::default(),
            size_multiplier: 10.0,
            verify_ms: 50.0,
            max_rounds: 200,
            ingress_ms_per_unit: 2.0,
            pow_difficulty_bits: 10,
            pow_trial_ms: 1.0,
            lambda: 128,
            seed: 0,
            publisher: NodeId(0),
            coordinator: NodeId(0),
            trace: false,
            fault: None,
        }
    }
}

impl RingConfig {
    fn derived(&self, seed: u64) -> RingConfig {
        RingConfig { noise_seed: seed, ..*self }
    }
}

/// One evaluation by a pool head: `round,pool,accuracy,loss,sim_time_ms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedMetric {
    pub round: u32,
    pub pool: usize,
    pub accuracy: f64,
    /// Mean cross-entropy over the publisher's example set.
    pub loss: f64,
    pub sim_time_ms: Millis,
}

impl FedMetric {
    pub fn csv(metrics: &[FedMetric]) -> String {
        let mut out = String::from("round,pool,accuracy,loss,sim_time_ms\n");
        for m in metrics {
            out.push_str(&format!("{},{},{},{},{}\n", m.round, m.pool, m.accuracy, m.loss, m.sim_time_ms));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub mode: ConsensusMode,
    pub task_id: u64,
    pub height: u64,
    pub winner_pool: usize,
    pub proposer: NodeId,
    /// Simulated time from task announcement to the accepted block.
    pub latency_ms: Millis,
    /// Accuracy measured by the verifier; `None` for PoW.
    pub accuracy: Option<f64>,
    /// FL rounds the winner ran.
    pub fl_rounds: u32,
    pub fed_metrics: Vec<FedMetric>,
    pub rejected_pools: Vec<usize>,
    /// Arrival time of the task announcement at every node.
    pub announce_ms: Vec<Millis>,
    pub messages: u64,
    pub ring_messages: u64,
    pub pow_trials: Option<u64>,
    pub trace_csv: Option<String>,
    /// Quantized model the winner committed to; `None` for PoW.
    pub model: Option<Model>,
    /// Ring transcript of the winner's last aggregation, kept when tracing.
    pub transcript: Option<Transcript>,
}

pub(crate) fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(p.wrapping_add(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// SHA-256 over `task | seed | node | nonce`.
pub fn pow_digest(task_id: u64, seed: u64, node: NodeId, nonce: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"fedchain/pow");
    h.update(task_id.to_le_bytes());
    h.update(seed.to_le_bytes());
    h.update((node.0 as u64).to_le_bytes());
    h.update(nonce.to_le_bytes());
    h.finalize().into()
}

/// True when the digest has at least `bits` leading zero bits.
pub fn pow_meets_difficulty(digest: &[u8; 32], bits: u32) -> bool {
    let mut zeros = 0;
    for b in digest {
        if *b == 0 {
            zeros += 8;
        } else {
            zeros += b.leading_zeros();
            break;
        }
    }
    zeros >= bits
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Msg {
    Announce,
    TrainDone { group: usize, gen: u32, round: u32 },
    Ring { group: usize, gen: u32, round: u32, step: usize },
    Upload { gen: u32 },
    IngressDone { gen: u32 },
    EgressSend { gen: u32, round: u32, to: NodeId },
    Download { gen: u32, round: u32 },
    Proof { group: usize, gen: u32 },
    VerifyDone { group: usize },
    Reply { group: usize, gen: u32 },
    Resume { group: usize, gen: u32, round: u32 },
    PowFound { node: NodeId, nonce: u64 },
}

impl Payload for Msg {
    fn kind(&self) -> &'static str {
        match self {
            Msg::Announce => "announce",
            Msg::TrainDone { .. } => "train_done",
            Msg::Ring { .. } => "ring",
            Msg::Upload { .. } => "upload",
            Msg::IngressDone { .. } => "ingress_done",
            Msg::EgressSend { .. } => "egress_send",
            Msg::Download { .. } => "download",
            Msg::Proof { .. } => "proof",
            Msg::VerifyDone { .. } => "verify_done",
            Msg::Reply { .. } => "reply",
            Msg::Resume { .. } => "resume",
            Msg::PowFound { .. } => "pow_found",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Topo {
    Secret,
    Plain,
    Star,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Training,
    Proving,
    Rejected,
    Failed,
}

#[derive(Debug, Clone, Default)]
struct Member {
    round: u32,
    trained: bool,
    next_send: usize,
    received: BTreeSet<(u32, usize)>,
}

#[derive(Debug, Clone)]
struct Attempt {
    model: Model,
    blinding: Blinding,
    commitment: ModelCommitment,
    commit_time: Millis,
    proof_time: Millis,
    round: u32,
    commit_tx: Option<Transaction>,
    seed: String,
    proof_digest: String,
    accepted: bool,
    claim_ok: bool,
    measured: f64,
}

#[derive(Debug, Clone)]
struct Group {
    /// Ring order; the head is at position 0.
    members: Vec<NodeId>,
    topo: Topo,
    weights: Vec<f64>,
    global: Vec<f64>,
    agg_round: Option<u32>,
    trained: Vec<Vec<f64>>,
    state: Vec<Member>,
    gen: u32,
    status: Status,
    rounds_done: u32,
    ingress_busy: Millis,
    received: usize,
    attempt: Option<Attempt>,
    transcript: Option<Transcript>,
}

impl Group {
    fn head(&self) -> NodeId {
        self.members[0]
    }

    fn total_steps(&self) -> usize {
        match self.topo {
            Topo::Secret => secret_ring_steps(self.members.len()),
            Topo::Plain => plain_ring_steps(self.members.len()),
            Topo::Star => 0,
        }
    }

    fn slot_sent(&self, pos: usize, step: usize) -> usize {
        match self.topo {
            Topo::Secret => secret_slot_sent(self.members.len(), pos, step),
            _ => plain_slot_sent(self.members.len(), pos, step),
        }
    }
}

struct RoundSim<'a> {
    mode: ConsensusMode,
    task: &'a Task,
    net: &'a Network,
    params: &'a RoundParams,
    pp: PublicParams,
    tip_hash: String,
    offset: Millis,
    deadline: Millis,
    model_len: usize,
    groups: Vec<Group>,
    /// node -> (group, ring position)
    place: Vec<Option<(usize, usize)>>,
    metrics: Vec<FedMetric>,
    rejected: Vec<usize>,
    announce: Vec<Millis>,
    tampered: bool,
    winner: Option<(usize, Millis)>,
    ring_messages: u64,
    pow: Option<(NodeId, u64, u64)>,
}

impl<'a> RoundSim<'a> {
    fn full_units(&self) -> u32 {
        chunk_size_units(self.model_len, self.model_len, self.params.size_multiplier)
    }

    fn send_or_local(&self, sim: &mut Simulator<Msg>, from: NodeId, to: NodeId, msg: Msg, units: u32) -> Result<(), ChainError> {
        if from == to {
            sim.timer(to, 0.0, msg)?;
        } else {
            sim.send(from, to, msg, units)?;
        }
        Ok(())
    }

    fn start_training(&mut self, sim: &mut Simulator<Msg>, g: usize, pos: usize, round: u32) -> Result<(), ChainError> {
        let group = &mut self.groups[g];
        let node = group.members[pos];
        let st = &mut group.state[pos];
        st.round = round;
        st.trained = false;
        st.next_send = 0;
        sim.timer(node, self.net.compute[node.0], Msg::TrainDone { group: g, gen: group.gen, round })?;
        Ok(())
    }

    fn on_train_done(&mut self, sim: &mut Simulator<Msg>, g: usize, pos: usize, round: u32) -> Result<(), ChainError> {
        let node = self.groups[g].members[pos];
        let cfg = TrainConfig { seed: derive_seed(self.params.seed, &[1, node.0 as u64, round as u64]), ..self.params.train };
        let start = Model { arch: self.task.arch, weights: self.groups[g].global.clone() };
        let trained = local_train(&start, &self.net.data[node.0], &cfg)?;
        let units = self.full_units();
        let group = &mut self.groups[g];
        group.trained[pos] = trained.weights;
        group.state[pos].trained = true;
        match group.topo {
            Topo::Star => {
                if pos == 0 {
                    self.central_received(sim, g)?;
                } else {
                    sim.send(node, group.head(), Msg::Upload { gen: group.gen }, units)?;
                }
                Ok(())
            }
            _ => self.try_advance(sim, g, pos),
        }
    }

    fn try_advance(&mut self, sim: &mut Simulator<Msg>, g: usize, pos: usize) -> Result<(), ChainError> {
        loop {
            let group = &self.groups[g];
            let st = &group.state[pos];
            if !st.trained {
                return Ok(());
            }
            let total = group.total_steps();
            let t = st.next_send;
            let prev_ok = t == 0 || st.received.contains(&(st.round, t - 1));
            if t < total && prev_ok {
                let k = group.members.len();
                let slot = group.slot_sent(pos, t);
                let len = chunk_bounds(self.model_len, k)[slot].len();
                let units = chunk_size_units(len, self.model_len, self.params.size_multiplier);
                let to = group.members[(pos + 1) % k];
                let msg = Msg::Ring { group: g, gen: group.gen, round: st.round, step: t };
                sim.send(group.members[pos], to, msg, units)?;
                self.ring_messages += 1;
                self.groups[g].state[pos].next_send += 1;
                continue;
            }
            if t == total && prev_ok {
                return self.member_complete(sim, g, pos);
            }
            return Ok(());
        }
    }

    fn aggregate_round(&mut self, g: usize, round: u32) -> Result<(), ChainError> {
        let group = &self.groups[g];
        if group.agg_round == Some(round) {
            return Ok(());
        }
        let k = group.members.len();
        let global = if k == 1 {
            group.trained[0].clone()
        } else if group.topo == Topo::Star {
            let models: Vec<&[f64]> = group.trained.iter().map(|m| m.as_slice()).collect();
            let w = crate::fed::AggregationWeights { weights: group.weights.clone(), scheme: self.params.scheme };
            aggregate(&models, &w)?
        } else {
            let inputs = group
                .trained
                .iter()
                .zip(&group.weights)
                .map(|(m, &w)| {
                    let f = prescale_factor(w, k);
                    to_fixed(&m.iter().map(|v| v * f).collect::<Vec<_>>())
                })
                .collect::<Result<Vec<_>, _>>()?;
            let outcome = match group.topo {
                Topo::Secret => {
                    let cfg = self.params.ring.derived(derive_seed(self.params.ring.noise_seed, &[2, g as u64, round as u64]));
                    secret_all_reduce(&inputs, &cfg)?
                }
                _ => plain_all_reduce(&inputs)?,
            };
            let avg = average_from_scaled_sum(&from_fixed(outcome.sum()), k);
            if self.params.trace {
                self.groups[g].transcript = Some(outcome.transcript);
            }
            avg
        };
        let group = &mut self.groups[g];
        group.global = global;
        group.agg_round = Some(round);
        Ok(())
    }

    fn member_complete(&mut self, sim: &mut Simulator<Msg>, g: usize, pos: usize) -> Result<(), ChainError> {
        let round = self.groups[g].state[pos].round;
        self.aggregate_round(g, round)?;
        let st = &mut self.groups[g].state[pos];
        st.received.retain(|&(r, _)| r > round);
        st.trained = false;
        st.next_send = usize::MAX;
        if pos == 0 {
            self.head_round_complete(sim, g, round)
        } else {
            self.start_training(sim, g, pos, round + 1)
        }
    }

    fn central_received(&mut self, sim: &mut Simulator<Msg>, g: usize) -> Result<(), ChainError> {
        let group = &mut self.groups[g];
        group.received += 1;
        if group.received < group.members.len() {
            return Ok(());
        }
        group.received = 0;
        let round = group.state[0].round;
        self.aggregate_round(g, round)?;
        self.head_round_complete(sim, g, round)
    }

    fn continue_training(&mut self, sim: &mut Simulator<Msg>, g: usize, round: u32) -> Result<(), ChainError> {
        if self.groups[g].topo == Topo::Star {
            let units = self.full_units();
            let per_msg = f64::from(units) * self.params.ingress_ms_per_unit;
            let group = &mut self.groups[g];
            let mut depart = group.ingress_busy.max(sim.now());
            let head = group.head();
            let gen = group.gen;
            for &to in &group.members[1..] {
                depart += per_msg;
                sim.schedule_at(head, depart, Msg::EgressSend { gen, round, to })?;
            }
            group.ingress_busy = depart;
        }
        self.start_training(sim, g, 0, round + 1)
    }

    fn head_round_complete(&mut self, sim: &mut Simulator<Msg>, g: usize, round: u32) -> Result<(), ChainError> {
        let model = Model { arch: self.task.arch, weights: self.groups[g].global.clone() };
        let accuracy = evaluate(&model, &self.task.example);
        let loss = local_loss(&model, &self.task.example).map(|l| l / self.task.example.len() as f64).unwrap_or(f64::INFINITY);
        self.metrics.push(FedMetric { round, pool: g, accuracy, loss, sim_time_ms: sim.now() });
        self.groups[g].rounds_done = round + 1;
        if accuracy >= self.task.target {
            return self.begin_proof(sim, g, round, model);
        }
        if round + 1 >= self.params.max_rounds || sim.now() >= self.deadline {
            self.groups[g].status = Status::Failed;
            return Ok(());
        }
        self.continue_training(sim, g, round)
    }

    fn begin_proof(&mut self, sim: &mut Simulator<Msg>, g: usize, round: u32, model: Model) -> Result<(), ChainError> {
        let model = quantize(&model)?;
        let blinding = Blinding::random(derive_seed(self.params.seed, &[3, g as u64, round as u64]));
        let commitment = commit(&model, &self.pp, &blinding)?;
        let units = self.full_units();
        let group = &mut self.groups[g];
        group.status = Status::Proving;
        group.gen += 1;
        group.attempt = Some(Attempt {
            model,
            blinding,
            commitment,
            commit_time: sim.now(),
            proof_time: 0.0,
            round,
            commit_tx: None,
            seed: String::new(),
            proof_digest: String::new(),
            accepted: false,
            claim_ok: false,
            measured: 0.0,
        });
        let (head, gen) = (group.head(), group.gen);
        self.send_or_local(sim, head, self.params.publisher, Msg::Proof { group: g, gen }, units)
    }

    fn on_proof(&mut self, sim: &mut Simulator<Msg>, g: usize) -> Result<(), ChainError> {
        let task = self.task;
        let head = self.groups[g].head();
        let Some(att) = self.groups[g].attempt.as_mut() else { return Ok(()) };
        att.proof_time = sim.now();
        let commit_tx = Transaction {
            task_id: task.id,
            author: head,
            time_ms: self.offset + att.commit_time,
            payload: TxPayload::ModelCommit { pool: g, commitment: att.commitment.hex() },
        };
        att.seed = challenge_seed(&self.tip_hash, &commit_tx);
        att.commit_tx = Some(commit_tx);
        let x = draw_challenge(&task.held_out, task.challenge_k, att.seed.as_bytes())?;
        let mut proof = prove(&att.model, &x, &self.pp, &att.blinding)?;
        if self.params.fault == Some(Fault::TamperFirstProof) && !self.tampered {
            self.tampered = true;
            proof.y[0] = (proof.y[0] + 1) % task.arch.classes();
        }
        att.proof_digest = hex::encode(Sha256::digest(serde_json::to_vec(&proof).expect("proof serialises")));
        let verdict = verify(&att.commitment, &x, &proof.y, &proof.pi, &self.pp);
        att.accepted = verdict.accepted;
        att.measured = verdict.accuracy;
        att.claim_ok = verdict.accepted
            && accuracy_claim_check_with_min(verdict.accuracy, task.target, task.challenge_k, K_MIN.min(task.challenge_k))?;
        sim.timer(self.params.publisher, self.params.verify_ms, Msg::VerifyDone { group: g })?;
        Ok(())
    }

    fn on_verify_done(&mut self, sim: &mut Simulator<Msg>, g: usize) -> Result<(), ChainError> {
        if self.mode == ConsensusMode::Pow {
            self.winner = Some((g, sim.now()));
            return Ok(());
        }
        let group = &mut self.groups[g];
        let att = group.attempt.as_ref().expect("verified attempt");
        if att.accepted && att.claim_ok {
            self.winner = Some((g, sim.now()));
        } else if !att.accepted {
            group.status = Status::Rejected;
            self.rejected.push(g);
        } else {
            let (head, gen) = (group.head(), group.gen);
            self.send_or_local(sim, self.params.publisher, head, Msg::Reply { group: g, gen }, 1)?;
        }
        Ok(())
    }

    fn on_reply(&mut self, sim: &mut Simulator<Msg>, g: usize) -> Result<(), ChainError> {
        let group = &mut self.groups[g];
        if sim.now() >= self.deadline || group.rounds_done >= self.params.max_rounds {
            group.status = Status::Failed;
            return Ok(());
        }
        group.status = Status::Training;
        group.gen += 1;
        group.attempt = None;
        group.received = 0;
        let round = group.rounds_done;
        let (head, gen) = (group.head(), group.gen);
        let others: Vec<NodeId> = group.members[1..].to_vec();
        for to in others {
            sim.send(head, to, Msg::Resume { group: g, gen, round }, 1)?;
        }
        self.start_training(sim, g, 0, round)
    }

    fn handle(&mut self, sim: &mut Simulator<Msg>, ev: Event<Msg>) -> Result<(), ChainError> {
        let node = ev.dst;
        let place = self.place.get(node.0).copied().flatten();
        let live = |s: &Self, g: usize, gen: u32| s.groups[g].gen == gen && s.groups[g].status == Status::Training;
        match ev.payload {
            Msg::Announce => {
                self.announce[node.0] = sim.now();
                if let Some((g, pos)) = place {
                    if self.mode != ConsensusMode::Pow {
                        self.start_training(sim, g, pos, 0)?;
                    }
                }
            }
            Msg::TrainDone { group, gen, round } => {
                let (_, pos) = place.expect("member");
                if live(self, group, gen) && self.groups[group].state[pos].round == round {
                    self.on_train_done(sim, group, pos, round)?;
                }
            }
            Msg::Ring { group, gen, round, step } => {
                let (_, pos) = place.expect("member");
                if live(self, group, gen) {
                    self.groups[group].state[pos].received.insert((round, step));
                    self.try_advance(sim, group, pos)?;
                }
            }
            Msg::Upload { gen } => {
                let (g, _) = place.expect("coordinator");
                if live(self, g, gen) {
                    let units = self.full_units();
                    let group = &mut self.groups[g];
                    let done = group.ingress_busy.max(sim.now()) + f64::from(units) * self.params.ingress_ms_per_unit;
                    group.ingress_busy = done;
                    sim.schedule_at(node, done, Msg::IngressDone { gen })?;
                }
            }
            Msg::IngressDone { gen } => {
                let (g, _) = place.expect("coordinator");
                if live(self, g, gen) {
                    self.central_received(sim, g)?;
                }
            }
            Msg::EgressSend { gen, round, to } => {
                let (g, _) = place.expect("coordinator");
                if self.groups[g].gen == gen {
                    let units = self.full_units();
                    sim.send(node, to, Msg::Download { gen, round }, units)?;
                }
            }
            Msg::Download { gen, round } => {
                let (g, pos) = place.expect("member");
                if live(self, g, gen) {
                    self.start_training(sim, g, pos, round + 1)?;
                }
            }
            Msg::Proof { group, gen } => {
                if self.mode == ConsensusMode::Pow {
                    sim.timer(node, self.params.verify_ms, Msg::VerifyDone { group })?;
                } else if self.groups[group].gen == gen && self.groups[group].status == Status::Proving {
                    self.on_proof(sim, group)?;
                }
            }
            Msg::VerifyDone { group } => self.on_verify_done(sim, group)?,
            Msg::Reply { group, gen } => {
                if self.groups[group].gen == gen && self.groups[group].status == Status::Proving {
                    self.on_reply(sim, group)?;
                }
            }
            Msg::Resume { group, gen, round } => {
                let (_, pos) = place.expect("member");
                if live(self, group, gen) {
                    self.start_training(sim, group, pos, round)?;
                }
            }
            Msg::PowFound { node: winner, .. } => {
                self.send_or_local(sim, winner, self.params.publisher, Msg::Proof { group: winner.0, gen: 0 }, 1)?;
            }
        }
        Ok(())
    }

    fn all_out(&self) -> bool {
        self.mode != ConsensusMode::Pow
            && self.groups.iter().all(|g| matches!(g.status, Status::Rejected | Status::Failed))
    }
}

fn make_group(
    members: Vec<NodeId>,
    topo: Topo,
    task: &Task,
    net: &Network,
    scheme: AggregationScheme,
    init: &[f64],
) -> Result<Group, ChainError> {
    let datasets: Vec<&Dataset> = members.iter().map(|m| &net.data[m.0]).collect();
    let weights = compute_weights(scheme, &datasets, &task.reference())?.weights;
    let k = members.len();
    Ok(Group {
        members,
        topo,
        weights,
        global: init.to_vec(),
        agg_round: None,
        trained: vec![Vec::new(); k],
        state: vec![Member::default(); k],
        gen: 0,
        status: Status::Training,
        rounds_done: 0,
        ingress_busy: 0.0,
        received: 0,
        attempt: None,
        transcript: None,
    })
}

impl Chain {
    pub(super) fn run_round(
        &mut self,
        task_id: u64,
        mode: ConsensusMode,
        net: &Network,
        pools: Option<&PoolAssignment>,
        params: &RoundParams,
    ) -> Result<RoundOutcome, ChainError> {
        let (task, publish_tx) = self.tasks.get(&task_id).cloned().ok_or(ChainError::UnknownTask(task_id))?;
        if self.ledger.blocks.iter().any(|b| b.header.task_id == Some(task_id)) {
            return Err(ChainError::InvalidTask(format!("task {task_id} already has a block")));
        }
        let n = net.n();
        if net.compute.len() != n || net.data.len() != n || params.publisher.0 >= n || params.coordinator.0 >= n {
            return Err(ChainError::InvalidParams("network vectors and node ids must cover every node".into()));
        }
        params.train.validate()?;
        let offset = self.now();
        let init = Model::init(task.arch, derive_seed(params.seed, &[0, task_id])).weights;

        let groups: Vec<Group> = match mode {
            ConsensusMode::Fedchain => {
                let pools = pools.ok_or_else(|| ChainError::InvalidParams("fedchain needs pools".into()))?;
                pools
                    .pools
                    .iter()
                    .map(|p| make_group(p.members.clone(), Topo::Secret, &task, net, params.scheme, &init))
                    .collect::<Result<_, _>>()?
            }
            ConsensusMode::GflRing => {
                vec![make_group((0..n).map(NodeId).collect(), Topo::Plain, &task, net, params.scheme, &init)?]
            }
            ConsensusMode::FedavgCentral => {
                let c = params.coordinator;
                let mut members = vec![c];
                members.extend((0..n).map(NodeId).filter(|&m| m != c));
                vec![make_group(members, Topo::Star, &task, net, params.scheme, &init)?]
            }
            ConsensusMode::Pow => Vec::new(),
        };
        let mut place = vec![None; n];
        for (g, group) in groups.iter().enumerate() {
            for (pos, m) in group.members.iter().enumerate() {
                if m.0 >= n || place[m.0].is_some() {
                    return Err(ChainError::InvalidParams(format!("node {m} placed twice or unknown")));
                }
                place[m.0] = Some((g, pos));
            }
        }

        let mut rs = RoundSim {
            mode,
            task: &task,
            net,
            params,
            pp: keygen(params.lambda, derive_seed(params.seed, &[4, task_id]))?,
            tip_hash: self.ledger.tip_hash().to_string(),
            offset,
            deadline: task.deadline_ms - offset,
            model_len: task.arch.param_count(),
            groups,
            place,
            metrics: Vec::new(),
            rejected: Vec::new(),
            announce: vec![f64::NAN; n],
            tampered: false,
            winner: None,
            ring_messages: 0,
            pow: None,
        };

        let mut sim = Simulator::new(net.latency.clone());
        if params.trace {
            sim = sim.with_trace();
        }
        for i in 0..n {
            let to = NodeId(i);
            rs.send_or_local(&mut sim, params.publisher, to, Msg::Announce, 1)?;
        }
        if mode == ConsensusMode::Pow {
            let (node, nonce, trials) = pow_search(task_id, params, n, rs.deadline)
                .ok_or_else(|| ChainError::RoundFailed { task: task_id, reason: "no PoW solution before the deadline".into() })?;
            rs.pow = Some((node, nonce, trials));
            let found = (nonce + 1) as f64 * params.pow_trial_ms;
            // hashing starts once the announcement arrives
            let start = if node == params.publisher { 0.0 } else { net.latency.get(params.publisher, node) };
            sim.schedule_at(node, start + found, Msg::PowFound { node, nonce })?;
        }

        while rs.winner.is_none() {
            let Some(ev) = sim.pop()? else { break };
            rs.handle(&mut sim, ev)?;
            if rs.all_out() {
                break;
            }
        }
        let Some((win, win_time)) = rs.winner else {
            return Err(ChainError::RoundFailed {
                task: task_id,
                reason: format!("no pool reached {} by the deadline or round cap", task.target),
            });
        };

        let mut txs = vec![publish_tx];
        let (proposer, commitment, members, weights, accuracy, fl_rounds, model, transcript);
        match mode {
            ConsensusMode::Pow => {
                let (node, nonce, _) = rs.pow.expect("pow solution");
                let digest = hex::encode(pow_digest(task_id, params.seed, node, nonce));
                let commit_tx = Transaction {
                    task_id,
                    author: node,
                    time_ms: offset + win_time,
                    payload: TxPayload::ModelCommit { pool: node.0, commitment: digest.clone() },
                };
                let seed = challenge_seed(&rs.tip_hash, &commit_tx);
                txs.push(commit_tx);
                txs.push(Transaction {
                    task_id,
                    author: node,
                    time_ms: offset + win_time,
                    payload: TxPayload::ProofSubmit {
                        pool: node.0,
                        commitment: digest.clone(),
                        challenge_seed: seed,
                        proof_digest: format!("{nonce:016x}"),
                        claimed_accuracy: None,
                    },
                });
                txs.push(Transaction {
                    task_id,
                    author: params.publisher,
                    time_ms: offset + win_time,
                    payload: TxPayload::VerifyVote { pool: node.0, accepted: true, measured_accuracy: None },
                });
                proposer = node;
                commitment = digest;
                members = vec![node];
                weights = vec![1.0];
                accuracy = None;
                fl_rounds = 0;
                model = None;
                transcript = None;
            }
            _ => {
                for (g, group) in rs.groups.iter().enumerate() {
                    txs.push(Transaction {
                        task_id,
                        author: group.head(),
                        time_ms: offset,
                        payload: TxPayload::PoolRegister { pool: g, head: group.head(), members: group.members.clone() },
                    });
                }
                let group = &rs.groups[win];
                let att = group.attempt.as_ref().expect("winning attempt");
                txs.push(att.commit_tx.clone().expect("commit recorded"));
                txs.push(Transaction {
                    task_id,
                    author: group.head(),
                    time_ms: offset + att.proof_time,
                    payload: TxPayload::ProofSubmit {
                        pool: win,
                        commitment: att.commitment.hex(),
                        challenge_seed: att.seed.clone(),
                        proof_digest: att.proof_digest.clone(),
                        claimed_accuracy: Some(task.target),
                    },
                });
                txs.push(Transaction {
                    task_id,
                    author: params.publisher,
                    time_ms: offset + win_time,
                    payload: TxPayload::VerifyVote { pool: win, accepted: true, measured_accuracy: Some(att.measured) },
                });
                proposer = group.head();
                commitment = att.commitment.hex();
                members = group.members.clone();
                weights = group.weights.clone();
                accuracy = Some(att.measured);
                fl_rounds = att.round + 1;
                model = Some(att.model.clone());
                transcript = group.transcript.clone();
            }
        }
        let block = self.ledger.append(offset + win_time, Some(proposer), Some(task_id), Some(commitment), txs);
        let height = block.header.height;
        self.winners.insert(task_id, (win, members, weights));

        Ok(RoundOutcome {
            mode,
            task_id,
            height,
            winner_pool: win,
            proposer,
            latency_ms: win_time,
            accuracy,
            fl_rounds,
            fed_metrics: rs.metrics,
            rejected_pools: rs.rejected,
            announce_ms: rs.announce,
            messages: sim.sent_count(),
            ring_messages: rs.ring_messages,
            pow_trials: rs.pow.map(|p| p.2),
            trace_csv: params.trace.then(|| sim.trace_csv()),
            model,
            transcript,
        })
    }
}

/// Round-robin hash trials: trial `g` is nonce `g / n` on node `g % n`,
/// finishing at `(nonce + 1) * trial_ms`. Returns `(node, nonce, trials)`.
fn pow_search(task_id: u64, params: &RoundParams, n: usize, deadline: Millis) -> Option<(NodeId, u64, u64)> {
    let mut g: u64 = 0;
    loop {
        let node = NodeId((g % n as u64) as usize);
        let nonce = g / n as u64;
        if (nonce + 1) as f64 * params.pow_trial_ms > deadline {
            return None;
        }
        if pow_meets_difficulty(&pow_digest(task_id, params.seed, node, nonce), params.pow_difficulty_bits) {
            return Some((node, nonce, g + 1));
        }
        g += 1;
    }
}
