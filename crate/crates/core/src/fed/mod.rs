//! Federated learning inside a mining pool: local training, dataset-size
//! (FedAvg) and label-distribution (KL) aggregation weights, weighted model
//! aggregation, and non-iid data partitioning.

mod data;
mod model;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use data::{
    mixture_distribution, partition_noniid, partition_with_profile, synthetic_dataset, Dataset, LabelHistogram, PartSpec,
    SyntheticSpec, HISTOGRAM_EPSILON,
};
pub use model::{
    evaluate, finite_difference_gradient, gradient_check, local_loss, local_train, max_relative_error, sgd_step, Architecture,
    Model, TrainConfig, RELATIVE_ERROR_FLOOR,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FedError {
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("label histogram must be a probability vector")]
    InvalidHistogram,
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("training diverged")]
    TrainingDiverged,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("KL divergence undefined: reference has zero mass on class {0}")]
    UndefinedDivergence(usize),
    #[error("histograms have {0} and {1} classes")]
    ClassCountMismatch(usize, usize),
    #[error("aggregation shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("cannot split {samples} samples into {parts} parts")]
    PartitionUnderflow { samples: usize, parts: usize },
    #[error("non-iid skew {0} outside [0, 1]")]
    InvalidSkew(f64),
    #[error("aggregation needs at least one participant")]
    NoParticipants,
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationScheme {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[default]
    Kl,
}

impl std::fmt::Display for AggregationScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AggregationScheme::FedAvg => "fedavg",
            AggregationScheme::Kl => "kl",
        })
    }
}

/// Per-participant aggregation weights on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationWeights {
    pub weights: Vec<f64>,
    pub scheme: AggregationScheme,
}

/// `|d_i| / sum_k |d_k|`.
pub fn fedavg_weights(sizes: &[usize]) -> Result<AggregationWeights, FedError> {
    if sizes.is_empty() {
        return Err(FedError::NoParticipants);
    }
    if sizes.contains(&0) {
        return Err(FedError::InvalidDataset("empty participant dataset".into()));
    }
    let total: usize = sizes.iter().sum();
    Ok(AggregationWeights {
        weights: sizes.iter().map(|&s| s as f64 / total as f64).collect(),
        scheme: AggregationScheme::FedAvg,
    })
}

/// `sum_X p(X) log2(p(X) / q(X))` in bits. Classes where `p` is zero
/// contribute nothing.
pub fn kl_divergence(p: &LabelHistogram, q: &LabelHistogram) -> Result<f64, FedError> {
    if p.classes() != q.classes() {
        return Err(FedError::ClassCountMismatch(p.classes(), q.classes()));
    }
    let mut total = 0.0;
    for (x, (&pi, &qi)) in p.freq().iter().zip(q.freq()).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(FedError::UndefinedDivergence(x));
        }
        total += pi * (pi / qi).log2();
    }
    Ok(total.max(0.0))
}

/// Clamp-and-normalise rule: `raw_i = max(0, 1 - D_i)`, normalised to sum 1;
/// falls back to FedAvg weights when every raw weight is zero.
pub fn weights_from_divergences(divergences: &[f64], sizes: &[usize]) -> Result<AggregationWeights, FedError> {
    if divergences.is_empty() {
        return Err(FedError::NoParticipants);
    }
    let raw: Vec<f64> = divergences.iter().map(|d| (1.0 - d).max(0.0)).collect();
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return fedavg_weights(sizes);
    }
    Ok(AggregationWeights { weights: raw.iter().map(|r| r / total).collect(), scheme: AggregationScheme::Kl })
}

/// Weights each participant by `1 - D_KL(d_i || d_ref)`, clamped at zero
/// and normalised. Histograms are expected to be smoothed already.
pub fn kl_weights(
    histograms: &[LabelHistogram],
    reference: &LabelHistogram,
    sizes: &[usize],
) -> Result<AggregationWeights, FedError> {
    let divergences: Vec<f64> = histograms.iter().map(|h| kl_divergence(h, reference)).collect::<Result<_, _>>()?;
    weights_from_divergences(&divergences, sizes)
}

pub fn compute_weights(
    scheme: AggregationScheme,
    datasets: &[&Dataset],
    reference: &LabelHistogram,
) -> Result<AggregationWeights, FedError> {
    let sizes: Vec<usize> = datasets.iter().map(|d| d.len()).collect();
    match scheme {
        AggregationScheme::FedAvg => fedavg_weights(&sizes),
        AggregationScheme::Kl => {
            let hists: Vec<LabelHistogram> =
                datasets.iter().map(|d| d.histogram().smoothed(HISTOGRAM_EPSILON)).collect();
            kl_weights(&hists, &reference.smoothed(HISTOGRAM_EPSILON), &sizes)
        }
    }
}

/// Weighted element-wise combination of participant weight vectors.
pub fn aggregate(models: &[&[f64]], weights: &AggregationWeights) -> Result<Vec<f64>, FedError> {
    let first = models.first().ok_or(FedError::NoParticipants)?;
    if weights.weights.len() != models.len() {
        return Err(FedError::ShapeMismatch { expected: models.len(), got: weights.weights.len() });
    }
    let mut out = vec![0.0; first.len()];
    for (m, &w) in models.iter().zip(&weights.weights) {
        if m.len() != out.len() {
            return Err(FedError::ShapeMismatch { expected: out.len(), got: m.len() });
        }
        out.iter_mut().zip(m.iter()).for_each(|(o, v)| *o += w * v);
    }
    Ok(out)
}

/// Inverse of the pre-scaling done before a ring sum: each participant
/// contributed `weight_i * k * model_i`, so the weighted average is the sum
/// divided by `k`.
pub fn average_from_scaled_sum(sum: &[f64], participants: usize) -> Vec<f64> {
    let k = participants.max(1) as f64;
    sum.iter().map(|v| v / k).collect()
}

/// Scale factor a participant applies to its model before the ring sum.
pub fn prescale_factor(weight: f64, participants: usize) -> f64 {
    weight * participants as f64
}
