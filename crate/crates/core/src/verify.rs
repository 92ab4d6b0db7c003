//! Model-accuracy verification with a KeyGen / Commit / Prove / Verify
//! interface.
//!
//! The scheme is a transparent hash commitment, not a zero-knowledge proof:
//! the proof opens the committed model so the verifier can re-execute every
//! prediction. Soundness rests on collision resistance of SHA-256 (λ = 128)
//! or SHA-512 (λ = 256). Nothing about the model stays hidden once a proof
//! is published.

use rand::seq::index::sample;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256, Sha512};
use thiserror::Error;

use crate::fed::{Architecture, Dataset, Model};
use crate::sharedring::{Fixed, FRAC_BITS};

const MODEL_MAGIC: &[u8; 4] = b"FCMW";
const DEFAULT_TAG: &str = "fedchain/verify/v1";
/// Minimum challenge size accepted by [`accuracy_claim_check`].
pub const K_MIN: usize = 200;
/// One-sided 99% standard normal quantile.
pub const Z_99: f64 = 2.326;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error("unsupported security parameter {0}; use 128 or 256")]
    UnsupportedLambda(u16),
    #[error("challenge batch is empty")]
    EmptyChallenge,
    #[error("challenge of {requested} samples exceeds held-out set of {available}")]
    ChallengeTooLarge { requested: usize, available: usize },
    #[error("{k} samples is below the minimum of {min}")]
    InsufficientSamples { k: usize, min: usize },
    #[error("weight {0} is not representable in fixed point")]
    NotRepresentable(f64),
    #[error("malformed model encoding: {0}")]
    MalformedModel(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicParams {
    pub lambda: u16,
    pub domain_tag: String,
    #[serde(with = "hex_bytes")]
    pub nonce: Vec<u8>,
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

impl PublicParams {
    fn hash(&self, parts: &[&[u8]]) -> Vec<u8> {
        fn run<H: Digest>(parts: &[&[u8]]) -> Vec<u8> {
            let mut h = H::new();
            for p in parts {
                h.update((p.len() as u64).to_le_bytes());
                h.update(p);
            }
            h.finalize().to_vec()
        }
        match self.lambda {
            128 => run::<Sha256>(parts),
            _ => run::<Sha512>(parts),
        }
    }
}

/// Public parameters for security level `lambda`, deterministic in `seed`.
pub fn keygen(lambda: u16, seed: u64) -> Result<PublicParams, VerifyError> {
    if lambda != 128 && lambda != 256 {
        return Err(VerifyError::UnsupportedLambda(lambda));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nonce = vec![0u8; lambda as usize / 8];
    rng.fill_bytes(&mut nonce);
    if nonce.iter().all(|b| *b == 0) {
        nonce[0] = 1;
    }
    Ok(PublicParams { lambda, domain_tag: DEFAULT_TAG.to_string(), nonce })
}

/// Rounds every weight to the fixed-point grid used for commitments.
pub fn quantize(model: &Model) -> Result<Model, VerifyError> {
    let weights = model
        .weights
        .iter()
        .map(|&w| Fixed::from_f64(w).map(Fixed::to_f64).map_err(|_| VerifyError::NotRepresentable(w)))
        .collect::<Result<_, _>>()?;
    Ok(Model { arch: model.arch, weights })
}

/// Canonical byte encoding of a model:
///
/// ```text
/// "FCMW" | frac_bits u8 | arch kind u8 | n_dims u8 | dims u32 LE ...
///        | n_words u64 LE | words i64 LE ...
/// ```
pub fn serialize_model(model: &Model) -> Result<Vec<u8>, VerifyError> {
    let (kind, dims) = model.arch.descriptor();
    let mut out = Vec::with_capacity(16 + dims.len() * 4 + model.weights.len() * 8);
    out.extend_from_slice(MODEL_MAGIC);
    out.push(FRAC_BITS as u8);
    out.push(kind);
    out.push(dims.len() as u8);
    for d in &dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&(model.weights.len() as u64).to_le_bytes());
    for &w in &model.weights {
        let f = Fixed::from_f64(w).map_err(|_| VerifyError::NotRepresentable(w))?;
        out.extend_from_slice(&f.0.to_le_bytes());
    }
    Ok(out)
}

pub fn deserialize_model(bytes: &[u8]) -> Result<Model, VerifyError> {
    let bad = |m: &str| VerifyError::MalformedModel(m.to_string());
    let mut cur = bytes;
    let mut take = |n: usize| -> Result<&[u8], VerifyError> {
        if cur.len() < n {
            return Err(bad("truncated"));
        }
        let (head, tail) = cur.split_at(n);
        cur = tail;
        Ok(head)
    };
    if take(4)? != MODEL_MAGIC {
        return Err(bad("bad magic"));
    }
    if take(1)?[0] as u32 != FRAC_BITS {
        return Err(bad("fractional bit count differs"));
    }
    let kind = take(1)?[0];
    let n_dims = take(1)?[0] as usize;
    let mut dims = Vec::with_capacity(n_dims);
    for _ in 0..n_dims {
        dims.push(u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize);
    }
    let arch = match (kind, dims.as_slice()) {
        (1, &[features, classes]) => Architecture::Softmax { features, classes },
        (2, &[features, hidden, classes]) => Architecture::Mlp { features, hidden, classes },
        _ => return Err(bad("unknown architecture")),
    };
    let n = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    if n != arch.param_count() {
        return Err(bad("word count does not match architecture"));
    }
    let mut weights = Vec::with_capacity(n);
    for _ in 0..n {
        weights.push(Fixed(i64::from_le_bytes(take(8)?.try_into().expect("8 bytes"))).to_f64());
    }
    if !cur.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok(Model { arch, weights })
}

/// Blinding value `r` mixed into a commitment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Blinding(#[serde(with = "hex_bytes")] pub Vec<u8>);

impl Blinding {
    pub fn random(seed: u64) -> Self {
        let mut r = vec![0u8; 32];
        ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut r);
        Blinding(r)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelCommitment {
    #[serde(with = "hex_bytes")]
    pub com: Vec<u8>,
}

impl ModelCommitment {
    pub fn hex(&self) -> String {
        hex::encode(&self.com)
    }
}

fn commit_bytes(encoded: &[u8], pp: &PublicParams, r: &Blinding) -> ModelCommitment {
    ModelCommitment { com: pp.hash(&[b"commit", pp.domain_tag.as_bytes(), &pp.nonce, encoded, &r.0]) }
}

/// `H(tag | nonce | serialize(m) | r)`.
pub fn commit(model: &Model, pp: &PublicParams, r: &Blinding) -> Result<ModelCommitment, VerifyError> {
    Ok(commit_bytes(&serialize_model(model)?, pp, r))
}

/// Challenge batch `X` drawn from a held-out set.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationSample {
    pub indices: Vec<usize>,
    pub data: Dataset,
}

impl VerificationSample {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Draws `k` distinct held-out samples seeded by `seed_bytes`, normally the
/// hash of the block carrying the commitment.
pub fn draw_challenge(held_out: &Dataset, k: usize, seed_bytes: &[u8]) -> Result<VerificationSample, VerifyError> {
    if k == 0 {
        return Err(VerifyError::EmptyChallenge);
    }
    if k > held_out.len() {
        return Err(VerifyError::ChallengeTooLarge { requested: k, available: held_out.len() });
    }
    let mut seed = [0u8; 32];
    let digest = Sha256::digest(seed_bytes);
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    let mut indices = sample(&mut rng, held_out.len(), k).into_vec();
    indices.sort_unstable();
    Ok(VerificationSample { data: held_out.subset(&indices), indices })
}

/// Model opening plus per-sample execution digests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofPayload {
    #[serde(with = "hex_bytes")]
    pub model: Vec<u8>,
    pub blinding: Blinding,
    pub trace: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionProof {
    pub y: Vec<usize>,
    pub pi: ProofPayload,
}

fn sample_digest(pp: &PublicParams, prev: &[u8], j: usize, x: &[f64], logits: &[f64], y: usize) -> Vec<u8> {
    let xs: Vec<u8> = x.iter().flat_map(|v| v.to_bits().to_le_bytes()).collect();
    let zs: Vec<u8> = logits.iter().flat_map(|v| v.to_bits().to_le_bytes()).collect();
    pp.hash(&[b"exec", prev, &(j as u64).to_le_bytes(), &xs, &zs, &(y as u64).to_le_bytes()])
}

fn execution_trace(pp: &PublicParams, com: &ModelCommitment, model: &Model, x: &Dataset) -> (Vec<usize>, Vec<Vec<u8>>) {
    let mut prev = pp.hash(&[b"trace", &pp.nonce, &com.com]);
    let mut ys = Vec::with_capacity(x.len());
    let mut trace = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        let logits = model.logits(x.x(j));
        let y = model.predict(x.x(j));
        prev = sample_digest(pp, &prev, j, x.x(j), &logits, y);
        ys.push(y);
        trace.push(prev.clone());
    }
    (ys, trace)
}

/// Runs the committed model on `x` and returns predictions with a proof
/// binding them to the commitment and the batch.
pub fn prove(
    model: &Model,
    x: &VerificationSample,
    pp: &PublicParams,
    r: &Blinding,
) -> Result<PredictionProof, VerifyError> {
    if x.is_empty() {
        return Err(VerifyError::EmptyChallenge);
    }
    let encoded = serialize_model(model)?;
    let opened = deserialize_model(&encoded)?;
    let com = commit_bytes(&encoded, pp, r);
    let (y, trace) = execution_trace(pp, &com, &opened, &x.data);
    Ok(PredictionProof {
        y,
        pi: ProofPayload { model: encoded, blinding: r.clone(), trace: trace.iter().map(hex::encode).collect() },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    OpeningMismatch,
    MalformedModel,
    ShapeMismatch,
    PredictionMismatch,
    TraceMismatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub accepted: bool,
    pub accuracy: f64,
    pub reason: Option<RejectReason>,
}

impl Verdict {
    fn reject(reason: RejectReason) -> Self {
        Self { accepted: false, accuracy: 0.0, reason: Some(reason) }
    }
}

/// Accepts iff the opening matches `com` and re-executing the opened model
/// on `x` reproduces both `y` and the digest chain. Accuracy is measured
/// against the held-out labels carried in `x`.
pub fn verify(com: &ModelCommitment, x: &VerificationSample, y: &[usize], pi: &ProofPayload, pp: &PublicParams) -> Verdict {
    if commit_bytes(&pi.model, pp, &pi.blinding) != *com {
        return Verdict::reject(RejectReason::OpeningMismatch);
    }
    let Ok(model) = deserialize_model(&pi.model) else {
        return Verdict::reject(RejectReason::MalformedModel);
    };
    if model.arch.features() != x.data.n_features() || y.len() != x.len() || pi.trace.len() != x.len() {
        return Verdict::reject(RejectReason::ShapeMismatch);
    }
    let (expected_y, trace) = execution_trace(pp, com, &model, &x.data);
    if expected_y != y {
        return Verdict::reject(RejectReason::PredictionMismatch);
    }
    if trace.iter().zip(&pi.trace).any(|(a, b)| hex::encode(a) != *b) {
        return Verdict::reject(RejectReason::TraceMismatch);
    }
    let correct = y.iter().enumerate().filter(|(j, &yj)| x.data.y(*j) == yj).count();
    Verdict { accepted: true, accuracy: correct as f64 / x.len() as f64, reason: None }
}

/// `z * sqrt(c (1 - c) / K)` with the one-sided 99% quantile.
pub fn accuracy_margin(claimed: f64, k: usize) -> f64 {
    Z_99 * (claimed * (1.0 - claimed) / k as f64).sqrt()
}

/// Accepts a claimed accuracy when the measured value is within the
/// one-sided binomial margin below it.
pub fn accuracy_claim_check(measured: f64, claimed: f64, k: usize) -> Result<bool, VerifyError> {
    accuracy_claim_check_with_min(measured, claimed, k, K_MIN)
}

pub fn accuracy_claim_check_with_min(measured: f64, claimed: f64, k: usize, k_min: usize) -> Result<bool, VerifyError> {
    if k < k_min {
        return Err(VerifyError::InsufficientSamples { k, min: k_min });
    }
    Ok(measured >= claimed - accuracy_margin(claimed, k))
}
