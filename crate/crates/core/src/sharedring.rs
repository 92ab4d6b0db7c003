//! Secret-sharing ring all-reduce over fixed-point weights.
//!
//! Every miner splits its weight vector into one chunk per ring position and
//! adds private noise `b_i` to the chunk it owns. Slot `s` then travels the
//! ring starting at its owner, so every partial sum in flight already
//! carries `b_s`:
//!
//! * steps `0..k-1` accumulate: miner `i` sends slot `(i - t) mod k` to
//!   `i + 1`, which adds its own chunk;
//! * step `k-1` returns the completed, still masked, slot `i + 1` to its
//!   owner, who strips `b_{i+1}`;
//! * steps `k..2k-1` circulate the unmasked sums until every miner holds
//!   the full vector.
//!
//! Arithmetic is wrapping two's-complement on `i64` words carrying
//! [`FRAC_BITS`] fractional bits, so mask cancellation is exact.

use std::fmt::Write as _;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fractional bits of the fixed-point weight representation.
pub const FRAC_BITS: u32 = 24;
const SCALE: f64 = (1u64 << FRAC_BITS) as f64;
/// Largest magnitude accepted by [`Fixed::from_f64`].
pub const MAX_ABS_VALUE: f64 = (1u64 << (62 - FRAC_BITS)) as f64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RingError {
    #[error("model of length {len} cannot be split into {parts} chunks")]
    ModelTooSmall { len: usize, parts: usize },
    #[error("cannot split into zero chunks")]
    ZeroParts,
    #[error("mask has length {mask}, chunk has length {chunk}")]
    MaskShape { mask: usize, chunk: usize },
    #[error("miner inputs disagree on shape")]
    ShapeMismatch,
    #[error("ring has no miners")]
    EmptyRing,
    #[error("value {0} is not representable in fixed point")]
    NotRepresentable(f64),
    #[error("ring broken: miner {miner} dropped at step {step}")]
    RingBroken { miner: usize, step: usize },
}

/// Fixed-point word with [`FRAC_BITS`] fractional bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct Fixed(pub i64);

impl Fixed {
    pub const ZERO: Fixed = Fixed(0);

    pub fn from_f64(x: f64) -> Result<Self, RingError> {
        if !x.is_finite() || x.abs() >= MAX_ABS_VALUE {
            return Err(RingError::NotRepresentable(x));
        }
        Ok(Fixed((x * SCALE).round() as i64))
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / SCALE
    }

    #[inline]
    pub fn wrapping_add(self, rhs: Fixed) -> Fixed {
        Fixed(self.0.wrapping_add(rhs.0))
    }

    #[inline]
    pub fn wrapping_sub(self, rhs: Fixed) -> Fixed {
        Fixed(self.0.wrapping_sub(rhs.0))
    }
}

pub fn to_fixed(values: &[f64]) -> Result<Vec<Fixed>, RingError> {
    values.iter().map(|&v| Fixed::from_f64(v)).collect()
}

pub fn from_fixed(values: &[Fixed]) -> Vec<f64> {
    values.iter().map(|v| v.to_f64()).collect()
}

fn add_into(acc: &mut [Fixed], rhs: &[Fixed]) {
    for (a, b) in acc.iter_mut().zip(rhs) {
        *a = a.wrapping_add(*b);
    }
}

/// Balanced contiguous chunk boundaries; the first `len % parts` chunks get
/// one extra element.
pub fn chunk_bounds(len: usize, parts: usize) -> Vec<Range<usize>> {
    let base = len / parts;
    let extra = len % parts;
    let mut start = 0;
    (0..parts)
        .map(|c| {
            let size = base + usize::from(c < extra);
            let r = start..start + size;
            start += size;
            r
        })
        .collect()
}

/// A weight vector cut into one chunk per ring position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkSplit {
    pub chunks: Vec<Vec<Fixed>>,
}

impl ChunkSplit {
    pub fn parts(&self) -> usize {
        self.chunks.len()
    }

    pub fn concat(&self) -> Vec<Fixed> {
        self.chunks.concat()
    }

    fn shape(&self) -> Vec<usize> {
        self.chunks.iter().map(Vec::len).collect()
    }
}

pub fn split(w: &[Fixed], parts: usize) -> Result<ChunkSplit, RingError> {
    if parts == 0 {
        return Err(RingError::ZeroParts);
    }
    if w.len() < parts {
        return Err(RingError::ModelTooSmall { len: w.len(), parts });
    }
    Ok(ChunkSplit { chunks: chunk_bounds(w.len(), parts).into_iter().map(|r| w[r].to_vec()).collect() })
}

/// Private additive noise for one miner's own chunk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoiseMask {
    pub seed: u64,
    pub values: Vec<Fixed>,
}

impl NoiseMask {
    /// Uniform noise over `bits`-wide two's-complement words (64 covers the
    /// whole word, which makes each masked chunk a one-time pad).
    pub fn generate(len: usize, seed: u64, bits: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bits = bits.clamp(1, 64);
        let values = (0..len)
            .map(|_| {
                if bits == 64 {
                    Fixed(rng.gen::<i64>())
                } else {
                    let half = 1i64 << (bits - 1);
                    Fixed(rng.gen_range(-half..half))
                }
            })
            .collect();
        Self { seed, values }
    }

    pub fn zero(len: usize) -> Self {
        Self { seed: 0, values: vec![Fixed::ZERO; len] }
    }
}

/// Adds `mask` to the chunk at ring position `position`.
pub fn mask_own_chunk(split: &ChunkSplit, position: usize, mask: &NoiseMask) -> Result<ChunkSplit, RingError> {
    let chunk = split.chunks.get(position).ok_or(RingError::ShapeMismatch)?;
    if chunk.len() != mask.values.len() {
        return Err(RingError::MaskShape { mask: mask.values.len(), chunk: chunk.len() });
    }
    let mut out = split.clone();
    add_into(&mut out.chunks[position], &mask.values);
    Ok(out)
}

pub fn unmask_own_sum(acc: &[Fixed], mask: &NoiseMask) -> Result<Vec<Fixed>, RingError> {
    if acc.len() != mask.values.len() {
        return Err(RingError::MaskShape { mask: mask.values.len(), chunk: acc.len() });
    }
    Ok(acc.iter().zip(&mask.values).map(|(a, b)| a.wrapping_sub(*b)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    ReduceScatter,
    /// Completed slot handed back to its owner for unmasking.
    Return,
    AllGather,
}

/// One chunk message between adjacent ring positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RingMessage {
    pub hop: usize,
    pub step: usize,
    pub from: usize,
    pub to: usize,
    pub slot: usize,
    pub phase: Phase,
    /// Whether the payload still carries the slot owner's noise.
    pub masked: bool,
    pub payload: Vec<Fixed>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub messages: Vec<RingMessage>,
}

impl Transcript {
    /// `hop,round,from,to,slot,masked` lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("hop,round,from,to,slot,masked\n");
        for m in &self.messages {
            let _ = writeln!(out, "{},{},{},{},{},{}", m.hop, m.step, m.from, m.to, m.slot, m.masked);
        }
        out
    }

    pub fn received_by(&self, position: usize) -> impl Iterator<Item = &RingMessage> {
        self.messages.iter().filter(move |m| m.to == position)
    }
}

/// Number of ring steps for the masked all-reduce over `k` miners; each
/// step moves one chunk per miner.
pub fn secret_ring_steps(k: usize) -> usize {
    if k < 2 {
        0
    } else {
        2 * k - 1
    }
}

/// Number of ring steps for the standard unmasked all-reduce.
pub fn plain_ring_steps(k: usize) -> usize {
    2 * k.saturating_sub(1)
}

/// Slot miner `i` sends at step `t` of the masked all-reduce.
pub fn secret_slot_sent(k: usize, i: usize, t: usize) -> usize {
    if t < k {
        (i + k * 2 - t) % k
    } else {
        (i + k * 3 - t) % k
    }
}

/// Slot miner `i` sends at step `t` of the standard all-reduce.
pub fn plain_slot_sent(k: usize, i: usize, t: usize) -> usize {
    if t + 1 < k {
        (i + k * 2 - t - 1) % k
    } else {
        (i + k * 2 + k - 1 - t) % k
    }
}

fn check_shapes(splits: &[ChunkSplit]) -> Result<usize, RingError> {
    let first = splits.first().ok_or(RingError::EmptyRing)?;
    let k = splits.len();
    let shape = first.shape();
    if shape.len() != k || splits.iter().any(|s| s.shape() != shape) {
        return Err(RingError::ShapeMismatch);
    }
    Ok(k)
}

/// Result of the reduce phase: miner `i` holds its own slot, complete and
/// still masked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReduceScatter {
    pub accumulated: Vec<Vec<Fixed>>,
    pub messages: Vec<RingMessage>,
}

/// Accumulate pass plus the return hop. `dropout` names a miner that stops
/// responding before the given step.
pub fn ring_reduce_scatter(masked: &[ChunkSplit], dropout: Option<(usize, usize)>) -> Result<ReduceScatter, RingError> {
    let k = check_shapes(masked)?;
    let mut working: Vec<Vec<Vec<Fixed>>> = masked.iter().map(|s| s.chunks.clone()).collect();
    let mut messages = Vec::with_capacity(k * k);
    if k == 1 {
        return Ok(ReduceScatter { accumulated: vec![working.remove(0).remove(0)], messages });
    }
    for t in 0..k {
        if let Some((miner, step)) = dropout {
            if step == t && miner < k {
                return Err(RingError::RingBroken { miner, step });
            }
        }
        let returning = t == k - 1;
        // All sends of a step are taken from the state before the step.
        let outgoing: Vec<(usize, Vec<Fixed>)> = (0..k)
            .map(|i| {
                let slot = secret_slot_sent(k, i, t);
                (slot, working[i][slot].clone())
            })
            .collect();
        for (i, (slot, payload)) in outgoing.into_iter().enumerate() {
            let to = (i + 1) % k;
            if returning {
                working[to][slot] = payload.clone();
            } else {
                add_into(&mut working[to][slot], &payload);
            }
            messages.push(RingMessage {
                hop: messages.len(),
                step: t,
                from: i,
                to,
                slot,
                phase: if returning { Phase::Return } else { Phase::ReduceScatter },
                masked: true,
                payload,
            });
        }
    }
    let accumulated = working.into_iter().enumerate().map(|(i, mut w)| w.swap_remove(i)).collect();
    Ok(ReduceScatter { accumulated, messages })
}

/// Result of the gather phase: every miner's copy of the summed vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllGather {
    pub outputs: Vec<Vec<Fixed>>,
    pub messages: Vec<RingMessage>,
}

/// Circulates each owner's unmasked slot sum around the ring.
/// `first_step`/`first_hop` continue the numbering of the reduce phase.
pub fn ring_allgather(sums: &[Vec<Fixed>], first_step: usize, first_hop: usize) -> Result<AllGather, RingError> {
    let k = sums.len();
    if k == 0 {
        return Err(RingError::EmptyRing);
    }
    let mut slots: Vec<Vec<Option<Vec<Fixed>>>> = (0..k)
        .map(|i| (0..k).map(|s| (s == i).then(|| sums[i].clone())).collect())
        .collect();
    let mut messages = Vec::with_capacity(k * k.saturating_sub(1));
    for u in 1..k {
        let outgoing: Vec<(usize, Vec<Fixed>)> = (0..k)
            .map(|i| {
                let slot = (i + k - u + 1) % k;
                (slot, slots[i][slot].clone().expect("slot arrived on the previous step"))
            })
            .collect();
        for (i, (slot, payload)) in outgoing.into_iter().enumerate() {
            let to = (i + 1) % k;
            slots[to][slot] = Some(payload.clone());
            messages.push(RingMessage {
                hop: first_hop + messages.len(),
                step: first_step + u - 1,
                from: i,
                to,
                slot,
                phase: Phase::AllGather,
                masked: false,
                payload,
            });
        }
    }
    let outputs = slots
        .into_iter()
        .map(|per_slot| per_slot.into_iter().flat_map(|c| c.expect("allgather complete")).collect())
        .collect();
    Ok(AllGather { outputs, messages })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RingConfig {
    pub noise_seed: u64,
    /// Width of the noise words; 64 draws over the full word.
    pub noise_bits: u32,
    /// Additionally mask every slot with pairwise-cancelling shares.
    pub mask_all_slots: bool,
    /// Force every `b_i` to zero. Only useful as a negative control.
    pub zero_noise: bool,
    pub dropout: Option<(usize, usize)>,
}

impl Default for RingConfig {
    fn default() -> Self {
        Self { noise_seed: 0, noise_bits: 64, mask_all_slots: false, zero_noise: false, dropout: None }
    }
}

fn sub_seed(seed: u64, parts: &[u64]) -> u64 {
    // SplitMix64 over the parts.
    let mut z = seed;
    for &p in parts {
        z = z.wrapping_add(p.wrapping_add(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RingOutcome {
    /// Summed weight vector as held by each ring position.
    pub outputs: Vec<Vec<Fixed>>,
    pub transcript: Transcript,
    /// Raw (unmasked) splits, kept for leakage checks.
    pub raw_splits: Vec<ChunkSplit>,
    pub masks: Vec<NoiseMask>,
}

impl RingOutcome {
    pub fn sum(&self) -> &[Fixed] {
        &self.outputs[0]
    }
}

/// Models shorter than the ring get zero words appended so every slot is
/// non-empty; returns the original length.
fn pad_to_ring(inputs: &[Vec<Fixed>]) -> (std::borrow::Cow<'_, [Vec<Fixed>]>, usize) {
    let k = inputs.len();
    let len = inputs.first().map_or(0, Vec::len);
    if len >= k || inputs.iter().any(|w| w.len() != len) {
        return (inputs.into(), len);
    }
    let padded = inputs.iter().map(|w| {
        let mut w = w.clone();
        w.resize(k, Fixed::ZERO);
        w
    });
    (padded.collect::<Vec<_>>().into(), len)
}

/// Masked all-reduce of `inputs` (one weight vector per ring position).
pub fn secret_all_reduce(inputs: &[Vec<Fixed>], cfg: &RingConfig) -> Result<RingOutcome, RingError> {
    let k = inputs.len();
    if k == 0 {
        return Err(RingError::EmptyRing);
    }
    let (padded, len) = pad_to_ring(inputs);
    let raw_splits: Vec<ChunkSplit> = padded.iter().map(|w| split(w, k)).collect::<Result<_, _>>()?;
    check_shapes(&raw_splits)?;
    let masks: Vec<NoiseMask> = (0..k)
        .map(|i| {
            let len = raw_splits[i].chunks[i].len();
            if cfg.zero_noise {
                NoiseMask::zero(len)
            } else {
                NoiseMask::generate(len, sub_seed(cfg.noise_seed, &[i as u64]), cfg.noise_bits)
            }
        })
        .collect();
    let mut masked: Vec<ChunkSplit> = raw_splits
        .iter()
        .zip(&masks)
        .enumerate()
        .map(|(i, (s, b))| mask_own_chunk(s, i, b))
        .collect::<Result<_, _>>()?;
    if cfg.mask_all_slots {
        apply_pairwise_shares(&mut masked, cfg.noise_seed);
    }
    let rs = ring_reduce_scatter(&masked, cfg.dropout)?;
    let sums: Vec<Vec<Fixed>> = rs
        .accumulated
        .iter()
        .zip(&masks)
        .map(|(acc, b)| unmask_own_sum(acc, b))
        .collect::<Result<_, _>>()?;
    let steps_done = if k > 1 { k } else { 0 };
    let ag = ring_allgather(&sums, steps_done, rs.messages.len())?;
    let mut messages = rs.messages;
    messages.extend(ag.messages);
    let outputs = ag.outputs.into_iter().map(|mut o| {
        o.truncate(len);
        o
    });
    Ok(RingOutcome { outputs: outputs.collect(), transcript: Transcript { messages }, raw_splits, masks })
}

/// For every pair `a < b` and every slot, `a` adds a pseudorandom share and
/// `b` subtracts it; the shares cancel in the ring sum.
fn apply_pairwise_shares(masked: &mut [ChunkSplit], seed: u64) {
    let k = masked.len();
    for a in 0..k {
        for b in a + 1..k {
            for slot in 0..k {
                let len = masked[a].chunks[slot].len();
                let share = NoiseMask::generate(len, sub_seed(seed, &[0xA11, a as u64, b as u64, slot as u64]), 64);
                for (x, s) in masked[a].chunks[slot].iter_mut().zip(&share.values) {
                    *x = x.wrapping_add(*s);
                }
                for (x, s) in masked[b].chunks[slot].iter_mut().zip(&share.values) {
                    *x = x.wrapping_sub(*s);
                }
            }
        }
    }
}

/// Standard (unmasked) ring all-reduce: reduce-scatter ending at each
/// slot's owner, then allgather. `2(k-1)` steps.
pub fn plain_all_reduce(inputs: &[Vec<Fixed>]) -> Result<RingOutcome, RingError> {
    let k = inputs.len();
    if k == 0 {
        return Err(RingError::EmptyRing);
    }
    let (padded, len) = pad_to_ring(inputs);
    let raw_splits: Vec<ChunkSplit> = padded.iter().map(|w| split(w, k)).collect::<Result<_, _>>()?;
    check_shapes(&raw_splits)?;
    let mut working: Vec<Vec<Vec<Fixed>>> = raw_splits.iter().map(|s| s.chunks.clone()).collect();
    let mut messages = Vec::new();
    for t in 0..k.saturating_sub(1) {
        let outgoing: Vec<(usize, Vec<Fixed>)> = (0..k)
            .map(|i| {
                let slot = plain_slot_sent(k, i, t);
                (slot, working[i][slot].clone())
            })
            .collect();
        for (i, (slot, payload)) in outgoing.into_iter().enumerate() {
            let to = (i + 1) % k;
            add_into(&mut working[to][slot], &payload);
            messages.push(RingMessage {
                hop: messages.len(),
                step: t,
                from: i,
                to,
                slot,
                phase: Phase::ReduceScatter,
                masked: false,
                payload,
            });
        }
    }
    let sums: Vec<Vec<Fixed>> = working.into_iter().enumerate().map(|(i, mut w)| w.swap_remove(i)).collect();
    let ag = ring_allgather(&sums, k.saturating_sub(1), messages.len())?;
    messages.extend(ag.messages);
    let masks = (0..k).map(|i| NoiseMask::zero(raw_splits[i].chunks[i].len())).collect();
    let outputs = ag.outputs.into_iter().map(|mut o| {
        o.truncate(len);
        o
    });
    Ok(RingOutcome { outputs: outputs.collect(), transcript: Transcript { messages }, raw_splits, masks })
}

/// Outcome of scanning one miner's view of the reduce phase.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeakageReport {
    pub receiver: usize,
    pub messages_checked: usize,
    /// `(hop, owner, slot)` for every received payload equal to another
    /// miner's raw chunk.
    pub raw_matches: Vec<(usize, usize, usize)>,
    /// Hops where a slot's first message (carrying only its owner's chunk)
    /// was not masked.
    pub unmasked_first_hops: Vec<usize>,
}

impl LeakageReport {
    pub fn passed(&self) -> bool {
        self.raw_matches.is_empty() && self.unmasked_first_hops.is_empty()
    }
}

/// Checks that nothing `receiver` saw before the allgather phase equals a
/// raw chunk of another miner.
pub fn transcript_leakage_check(transcript: &Transcript, receiver: usize, raw_splits: &[ChunkSplit]) -> LeakageReport {
    let mut report = LeakageReport {
        receiver,
        messages_checked: 0,
        raw_matches: Vec::new(),
        unmasked_first_hops: Vec::new(),
    };
    for m in transcript.received_by(receiver).filter(|m| m.phase != Phase::AllGather) {
        report.messages_checked += 1;
        for (owner, s) in raw_splits.iter().enumerate() {
            if owner != receiver && s.chunks.get(m.slot) == Some(&m.payload) {
                report.raw_matches.push((m.hop, owner, m.slot));
            }
        }
        if m.step == 0 && m.slot == m.from && raw_splits.get(m.from).and_then(|s| s.chunks.get(m.slot)) == Some(&m.payload) {
            report.unmasked_first_hops.push(m.hop);
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fx(v: &[i64]) -> Vec<Fixed> {
        v.iter().map(|&x| Fixed(x)).collect()
    }

    /// Direct summation oracle, independent of the ring schedule.
    fn column_sum(inputs: &[Vec<Fixed>]) -> Vec<Fixed> {
        let mut out = vec![0i64; inputs[0].len()];
        for w in inputs {
            for (o, x) in out.iter_mut().zip(w) {
                *o = o.wrapping_add(x.0);
            }
        }
        fx(&out)
    }

    #[test]
    fn split_lengths() {
        let w = fx(&[1, 2, 3, 4, 5, 6]);
        assert_eq!(split(&w, 3).unwrap().shape(), vec![2, 2, 2]);
        let w7 = fx(&[1, 2, 3, 4, 5, 6, 7]);
        let s = split(&w7, 3).unwrap();
        assert_eq!(s.shape(), vec![3, 2, 2]);
        assert_eq!(s.chunks, vec![fx(&[1, 2, 3]), fx(&[4, 5]), fx(&[6, 7])]);
        assert_eq!(split(&w, 7).unwrap_err(), RingError::ModelTooSmall { len: 6, parts: 7 });
        assert_eq!(split(&w, 0).unwrap_err(), RingError::ZeroParts);
    }

    #[test]
    fn masking_examples() {
        let s = split(&fx(&[1, 2, 3, 4]), 2).unwrap();
        assert_eq!(mask_own_chunk(&s, 0, &NoiseMask::zero(2)).unwrap(), s);
        let noise = NoiseMask { seed: 0, values: fx(&[10, -10]) };
        let m = mask_own_chunk(&s, 0, &noise).unwrap();
        assert_eq!(m.chunks[0], fx(&[11, -8]));
        assert_eq!(m.chunks[1], s.chunks[1]);
        assert_eq!(unmask_own_sum(&m.chunks[0], &noise).unwrap(), s.chunks[0]);
        assert_eq!(
            mask_own_chunk(&s, 1, &NoiseMask::zero(3)).unwrap_err(),
            RingError::MaskShape { mask: 3, chunk: 2 }
        );
    }

    #[test]
    fn full_width_noise_round_trips() {
        let w = to_fixed(&[0.5, -1.25, 3.0]).unwrap();
        let s = split(&w, 1).unwrap();
        let b = NoiseMask::generate(3, 99, 64);
        let masked = mask_own_chunk(&s, 0, &b).unwrap();
        assert_eq!(unmask_own_sum(&masked.chunks[0], &b).unwrap(), w);
    }

    #[test]
    fn single_miner_ring() {
        let b = NoiseMask { seed: 0, values: fx(&[5, 5, 5]) };
        let s = mask_own_chunk(&split(&fx(&[1, 2, 3]), 1).unwrap(), 0, &b).unwrap();
        let rs = ring_reduce_scatter(&[s], None).unwrap();
        assert!(rs.messages.is_empty());
        assert_eq!(rs.accumulated[0], fx(&[6, 7, 8]));
        let ag = ring_allgather(&[fx(&[1, 2, 3])], 0, 0).unwrap();
        assert!(ag.messages.is_empty());
        assert_eq!(ag.outputs[0], fx(&[1, 2, 3]));
    }

    #[test]
    fn two_miner_accumulation_matches_eq8() {
        let w1 = fx(&[1, 2, 3, 4]);
        let w2 = fx(&[10, 20, 30, 40]);
        let b1 = NoiseMask { seed: 0, values: fx(&[1000, 2000]) };
        let b2 = NoiseMask { seed: 0, values: fx(&[-7, 7]) };
        let s1 = mask_own_chunk(&split(&w1, 2).unwrap(), 0, &b1).unwrap();
        let s2 = mask_own_chunk(&split(&w2, 2).unwrap(), 1, &b2).unwrap();
        let rs = ring_reduce_scatter(&[s1, s2], None).unwrap();
        // b_1 + w_{1,1} + w_{2,1}
        assert_eq!(rs.accumulated[0], fx(&[1011, 2022]));
        assert_eq!(rs.accumulated[1], fx(&[26, 51]));
    }

    #[test]
    fn three_miner_integer_example() {
        let inputs = vec![fx(&[1, 2, 3, 4, 5, 6, 7]), fx(&[-3, 0, 8, 1, 1, 2, 9]), fx(&[100, 50, -20, 0, 4, 4, 4])];
        let cfg = RingConfig { noise_seed: 5, ..RingConfig::default() };
        let out = secret_all_reduce(&inputs, &cfg).unwrap();
        let oracle = column_sum(&inputs);
        for o in &out.outputs {
            assert_eq!(o, &oracle);
        }
        // Owner-held accumulations before unmasking are oracle + b_i.
        let masked: Vec<ChunkSplit> = out
            .raw_splits
            .iter()
            .zip(&out.masks)
            .enumerate()
            .map(|(i, (s, b))| mask_own_chunk(s, i, b).unwrap())
            .collect();
        let rs = ring_reduce_scatter(&masked, None).unwrap();
        let oracle_chunks = split(&oracle, 3).unwrap();
        for i in 0..3 {
            let unmasked = unmask_own_sum(&rs.accumulated[i], &out.masks[i]).unwrap();
            assert_eq!(unmasked, oracle_chunks.chunks[i]);
            let wrong = unmask_own_sum(&rs.accumulated[i], &out.masks[(i + 1) % 3]);
            assert!(wrong.map_or(true, |w| w != oracle_chunks.chunks[i]));
        }
    }

    #[test]
    fn all_zero_models_unmask_to_zero() {
        let inputs = vec![vec![Fixed::ZERO; 5]; 4];
        let out = secret_all_reduce(&inputs, &RingConfig { noise_seed: 77, ..RingConfig::default() }).unwrap();
        assert!(out.outputs.iter().all(|o| o.iter().all(|x| *x == Fixed::ZERO)));
    }

    #[test]
    fn message_counts() {
        for k in 1..=6usize {
            let inputs: Vec<Vec<Fixed>> = (0..k).map(|i| fx(&[i as i64; 12])).collect();
            let secret = secret_all_reduce(&inputs, &RingConfig::default()).unwrap();
            assert_eq!(secret.transcript.messages.len(), secret_ring_steps(k) * k);
            let plain = plain_all_reduce(&inputs).unwrap();
            assert_eq!(plain.transcript.messages.len(), 2 * (k - 1) * k);
            assert_eq!(plain.outputs, secret.outputs);
        }
    }

    #[test]
    fn slot_schedule_matches_transcript() {
        let k = 5;
        let inputs: Vec<Vec<Fixed>> = (0..k).map(|i| fx(&[i as i64 + 1; 11])).collect();
        let out = secret_all_reduce(&inputs, &RingConfig::default()).unwrap();
        for m in &out.transcript.messages {
            assert_eq!(m.slot, secret_slot_sent(k, m.from, m.step));
        }
        let plain = plain_all_reduce(&inputs).unwrap();
        for m in &plain.transcript.messages {
            assert_eq!(m.slot, plain_slot_sent(k, m.from, m.step));
        }
    }

    #[test]
    fn two_miner_transcript_never_exposes_raw_chunks() {
        let inputs = vec![fx(&[3, 1, 4, 1]), fx(&[5, 9, 2, 6])];
        let out = secret_all_reduce(&inputs, &RingConfig { noise_seed: 8, ..RingConfig::default() }).unwrap();
        // Miner 1's first receipt is slot 0 from miner 0: w_{0,0} + b_0.
        let first = out.transcript.received_by(1).next().unwrap();
        assert_eq!((first.from, first.slot, first.step), (0, 0, 0));
        let expect: Vec<Fixed> = out.raw_splits[0].chunks[0]
            .iter()
            .zip(&out.masks[0].values)
            .map(|(a, b)| a.wrapping_add(*b))
            .collect();
        assert_eq!(first.payload, expect);
        for j in 0..2 {
            assert!(transcript_leakage_check(&out.transcript, j, &out.raw_splits).passed());
        }
    }

    #[test]
    fn zero_noise_fails_leakage_check() {
        let inputs = vec![fx(&[3, 1, 4, 1, 5]), fx(&[5, 9, 2, 6, 5]), fx(&[8, 9, 7, 9, 3])];
        let cfg = RingConfig { zero_noise: true, ..RingConfig::default() };
        let out = secret_all_reduce(&inputs, &cfg).unwrap();
        assert_eq!(out.outputs[0], column_sum(&inputs));
        let report = transcript_leakage_check(&out.transcript, 1, &out.raw_splits);
        assert!(!report.passed());
        assert!(!report.unmasked_first_hops.is_empty());
    }

    #[test]
    fn models_shorter_than_the_ring_are_padded() {
        let inputs: Vec<Vec<Fixed>> = (0..8).map(|i| fx(&[i, 1, -2, 3, 4, 5, 6])).collect();
        let out = secret_all_reduce(&inputs, &RingConfig { noise_seed: 5, ..RingConfig::default() }).unwrap();
        for o in &out.outputs {
            assert_eq!(o, &column_sum(&inputs));
        }
        for j in 0..8 {
            assert!(transcript_leakage_check(&out.transcript, j, &out.raw_splits).passed());
        }
        assert_eq!(plain_all_reduce(&inputs).unwrap().outputs[7], column_sum(&inputs));
        let cfg = RingConfig { zero_noise: true, ..RingConfig::default() };
        let out = secret_all_reduce(&inputs, &cfg).unwrap();
        assert!(!transcript_leakage_check(&out.transcript, 1, &out.raw_splits).passed());
    }

    #[test]
    fn hardened_mode_sums_correctly() {
        let inputs: Vec<Vec<Fixed>> = (0..4).map(|i| fx(&[i, 2 * i, -i, 7, 8, 9, 10])).collect();
        let cfg = RingConfig { mask_all_slots: true, noise_seed: 3, ..RingConfig::default() };
        let out = secret_all_reduce(&inputs, &cfg).unwrap();
        assert_eq!(out.outputs[0], column_sum(&inputs));
        for j in 0..4 {
            assert!(transcript_leakage_check(&out.transcript, j, &out.raw_splits).passed());
        }
    }

    #[test]
    fn dropout_breaks_ring() {
        let inputs: Vec<Vec<Fixed>> = (0..3).map(|i| fx(&[i; 6])).collect();
        let cfg = RingConfig { dropout: Some((2, 1)), ..RingConfig::default() };
        assert_eq!(secret_all_reduce(&inputs, &cfg).unwrap_err(), RingError::RingBroken { miner: 2, step: 1 });
    }

    #[test]
    fn transcript_csv() {
        let inputs = vec![fx(&[1, 2]), fx(&[3, 4])];
        let out = secret_all_reduce(&inputs, &RingConfig::default()).unwrap();
        let csv = out.transcript.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "hop,round,from,to,slot,masked");
        assert_eq!(lines[1], "0,0,0,1,0,true");
        assert_eq!(lines.len(), 1 + 6);
        assert_eq!(lines[6], "5,2,1,0,1,false");
    }

    #[test]
    fn fixed_point_conversion() {
        assert_eq!(Fixed::from_f64(1.0).unwrap(), Fixed(1 << FRAC_BITS));
        assert_eq!(Fixed::from_f64(-0.5).unwrap().to_f64(), -0.5);
        assert!(Fixed::from_f64(f64::NAN).is_err());
        assert!(Fixed::from_f64(MAX_ABS_VALUE).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

        proptest! {
            #[test]
            fn split_concat_round_trip(w in proptest::collection::vec(any::<i64>(), 1..80), k in 1usize..80) {
                let w = fx(&w);
                let k = k.min(w.len());
                let s = split(&w, k).unwrap();
                prop_assert_eq!(s.concat(), w.clone());
                let lens = s.shape();
                prop_assert!(lens.windows(2).all(|p| p[0] >= p[1] && p[0] - p[1] <= 1));
            }

            #[test]
            fn sum_is_exact_and_mask_neutral(
                k in 1usize..7,
                m in 7usize..40,
                seed in any::<u64>(),
                s1 in any::<u64>(),
                s2 in any::<u64>(),
                hardened in any::<bool>(),
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let inputs: Vec<Vec<Fixed>> = (0..k)
                    .map(|_| (0..m).map(|_| Fixed(rng.gen_range(-(1i64 << 40)..(1i64 << 40)))).collect())
                    .collect();
                let a = secret_all_reduce(&inputs, &RingConfig { noise_seed: s1, mask_all_slots: hardened, ..RingConfig::default() }).unwrap();
                let b = secret_all_reduce(&inputs, &RingConfig { noise_seed: s2, mask_all_slots: hardened, ..RingConfig::default() }).unwrap();
                let oracle = column_sum(&inputs);
                prop_assert!(a.outputs.iter().all(|o| *o == oracle));
                prop_assert_eq!(&a.outputs, &b.outputs);
                for j in 0..k {
                    prop_assert!(transcript_leakage_check(&a.transcript, j, &a.raw_splits).passed());
                }
            }
        }
    }
}
