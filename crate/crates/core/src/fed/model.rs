//! Dense classifiers trained with mini-batch gradient descent.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::FedError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// Single dense layer followed by softmax.
    Softmax { features: usize, classes: usize },
    /// One tanh hidden layer, then a dense softmax output layer.
    Mlp { features: usize, hidden: usize, classes: usize },
}

impl Architecture {
    pub fn param_count(&self) -> usize {
        match *self {
            Architecture::Softmax { features, classes } => features * classes + classes,
            Architecture::Mlp { features, hidden, classes } => hidden * features + hidden + classes * hidden + classes,
        }
    }

    pub fn features(&self) -> usize {
        match *self {
            Architecture::Softmax { features, .. } | Architecture::Mlp { features, .. } => features,
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            Architecture::Softmax { classes, .. } | Architecture::Mlp { classes, .. } => classes,
        }
    }

    /// Kind tag and layer widths, used by the canonical serialisation.
    pub fn descriptor(&self) -> (u8, Vec<u32>) {
        match *self {
            Architecture::Softmax { features, classes } => (1, vec![features as u32, classes as u32]),
            Architecture::Mlp { features, hidden, classes } => (2, vec![features as u32, hidden as u32, classes as u32]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub weights: Vec<f64>,
}

/// Mini-batch gradient descent settings for one local training pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub local_epochs: u32,
    pub batch_size: usize,
    pub seed: u64,
    pub accuracy_target: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 0.1, local_epochs: 1, batch_size: 16, seed: 0, accuracy_target: 0.90 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), FedError> {
        let ok = self.learning_rate.is_finite()
            && self.learning_rate >= 0.0
            && self.local_epochs >= 1
            && self.batch_size >= 1
            && self.accuracy_target > 0.0
            && self.accuracy_target <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(FedError::InvalidConfig(format!("{self:?}")))
        }
    }
}

fn log_softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter_mut().for_each(|v| *v -= lse);
}

impl Model {
    pub fn zeros(arch: Architecture) -> Self {
        Self { arch, weights: vec![0.0; arch.param_count()] }
    }

    /// Small Gaussian initialisation, deterministic in `seed`.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 0.1).expect("constant std");
        Self { arch, weights: (0..arch.param_count()).map(|_| dist.sample(&mut rng)).collect() }
    }

    pub fn from_weights(arch: Architecture, weights: Vec<f64>) -> Result<Self, FedError> {
        if weights.len() != arch.param_count() {
            return Err(FedError::ShapeMismatch { expected: arch.param_count(), got: weights.len() });
        }
        Ok(Self { arch, weights })
    }

    fn check_data(&self, d: &Dataset) -> Result<(), FedError> {
        if d.n_features() != self.arch.features() || d.n_classes() != self.arch.classes() {
            return Err(FedError::InvalidDataset(format!(
                "dataset is {}x{}, model expects {}x{}",
                d.n_features(),
                d.n_classes(),
                self.arch.features(),
                self.arch.classes()
            )));
        }
        Ok(())
    }

    /// Output-layer logits for one sample. `hidden` receives the hidden
    /// activations for MLPs.
    fn logits_into(&self, x: &[f64], hidden: &mut Vec<f64>, out: &mut Vec<f64>) {
        out.clear();
        hidden.clear();
        let w = &self.weights;
        match self.arch {
            Architecture::Softmax { features, classes } => {
                let bias = &w[features * classes..];
                for c in 0..classes {
                    let row = &w[c * features..(c + 1) * features];
                    out.push(bias[c] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>());
                }
            }
            Architecture::Mlp { features, hidden: h, classes } => {
                let (w1, rest) = w.split_at(h * features);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(classes * h);
                for j in 0..h {
                    let row = &w1[j * features..(j + 1) * features];
                    hidden.push((b1[j] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).tanh());
                }
                for c in 0..classes {
                    let row = &w2[c * h..(c + 1) * h];
                    out.push(b2[c] + row.iter().zip(hidden.iter()).map(|(a, b)| a * b).sum::<f64>());
                }
            }
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let (mut h, mut out) = (Vec::new(), Vec::new());
        self.logits_into(x, &mut h, &mut out);
        out
    }

    /// Class probabilities for one sample.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.logits(x);
        log_softmax_in_place(&mut z);
        z.iter_mut().for_each(|v| *v = v.exp());
        z
    }

    /// Arg-max class; ties resolve to the lowest index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let z = self.logits(x);
        let mut best = 0;
        for (c, v) in z.iter().enumerate() {
            if *v > z[best] {
                best = c;
            }
        }
        best
    }

    /// Summed cross-entropy and, when `grad` is given, its gradient summed
    /// over `indices`.
    fn loss_and_grad(&self, d: &Dataset, indices: &[usize], mut grad: Option<&mut [f64]>) -> f64 {
        let (mut hidden, mut z) = (Vec::new(), Vec::new());
        let mut dh = Vec::new();
        let mut total = 0.0;
        for &i in indices {
            let x = d.x(i);
            let y = d.y(i);
            self.logits_into(x, &mut hidden, &mut z);
            log_softmax_in_place(&mut z);
            total -= z[y];
            let Some(g) = grad.as_deref_mut() else { continue };
            // dL/dlogit = p - onehot(y)
            z.iter_mut().for_each(|v| *v = v.exp());
            z[y] -= 1.0;
            match self.arch {
                Architecture::Softmax { features, classes } => {
                    for c in 0..classes {
                        let row = &mut g[c * features..(c + 1) * features];
                        row.iter_mut().zip(x).for_each(|(gw, xv)| *gw += z[c] * xv);
                        g[features * classes + c] += z[c];
                    }
                }
                Architecture::Mlp { features, hidden: h, classes } => {
                    let w2 = &self.weights[h * features + h..h * features + h + classes * h];
                    dh.clear();
                    dh.resize(h, 0.0);
                    let off_w2 = h * features + h;
                    let off_b2 = off_w2 + classes * h;
                    for c in 0..classes {
                        for j in 0..h {
                            g[off_w2 + c * h + j] += z[c] * hidden[j];
                            dh[j] += z[c] * w2[c * h + j];
                        }
                        g[off_b2 + c] += z[c];
                    }
                    for j in 0..h {
                        let da = dh[j] * (1.0 - hidden[j] * hidden[j]);
                        let row = &mut g[j * features..(j + 1) * features];
                        row.iter_mut().zip(x).for_each(|(gw, xv)| *gw += da * xv);
                        g[h * features + j] += da;
                    }
                }
            }
        }
        total
    }

    /// Gradient of the summed loss over the whole dataset.
    pub fn gradient(&self, d: &Dataset) -> Result<Vec<f64>, FedError> {
        self.check_data(d)?;
        let mut g = vec![0.0; self.weights.len()];
        let all: Vec<usize> = (0..d.len()).collect();
        self.loss_and_grad(d, &all, Some(&mut g));
        Ok(g)
    }
}

/// Summed cross-entropy of `model` over `d`.
pub fn local_loss(model: &Model, d: &Dataset) -> Result<f64, FedError> {
    model.check_data(d)?;
    if model.weights.iter().any(|w| !w.is_finite()) {
        return Err(FedError::NonFiniteLoss);
    }
    let all: Vec<usize> = (0..d.len()).collect();
    let loss = model.loss_and_grad(d, &all, None);
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(FedError::NonFiniteLoss)
    }
}

/// `w <- w - rate * g`.
pub fn sgd_step(weights: &mut [f64], grad: &[f64], rate: f64) {
    weights.iter_mut().zip(grad).for_each(|(w, g)| *w -= rate * g);
}

/// `local_epochs` passes of mini-batch gradient descent; each step moves by
/// `learning_rate` times the batch-mean gradient.
pub fn local_train(model: &Model, d: &Dataset, cfg: &TrainConfig) -> Result<Model, FedError> {
    cfg.validate()?;
    model.check_data(d)?;
    let mut out = model.clone();
    if cfg.learning_rate == 0.0 || d.is_empty() {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..d.len()).collect();
    let mut grad = vec![0.0; out.weights.len()];
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            out.loss_and_grad(d, batch, Some(&mut grad));
            sgd_step(&mut out.weights, &grad, cfg.learning_rate / batch.len() as f64);
        }
        if out.weights.iter().any(|w| !w.is_finite()) {
            return Err(FedError::TrainingDiverged);
        }
    }
    if !local_loss(&out, d).map(f64::is_finite).unwrap_or(false) {
        return Err(FedError::TrainingDiverged);
    }
    Ok(out)
}

/// Central finite-difference gradient of the summed loss.
pub fn finite_difference_gradient(model: &Model, d: &Dataset, h: f64) -> Result<Vec<f64>, FedError> {
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(model.weights.len());
    for k in 0..model.weights.len() {
        let w0 = probe.weights[k];
        probe.weights[k] = w0 + h;
        let up = local_loss(&probe, d)?;
        probe.weights[k] = w0 - h;
        let down = local_loss(&probe, d)?;
        probe.weights[k] = w0;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Floor on the denominator of [`max_relative_error`], so components with
/// near-zero gradient are judged on absolute error.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-2;

/// `max_k |a_k - n_k| / max(|n_k|, floor)` with `n` the numerical reference.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(RELATIVE_ERROR_FLOOR))
        .fold(0.0, f64::max)
}

/// Compares the analytic gradient against central differences with
/// `h = 1e-4` and returns the largest relative error.
pub fn gradient_check(model: &Model, d: &Dataset) -> Result<f64, FedError> {
    let analytic = model.gradient(d)?;
    let numeric = finite_difference_gradient(model, d, 1e-4)?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// Fraction of samples whose arg-max prediction equals the label.
pub fn evaluate(model: &Model, d: &Dataset) -> f64 {
    if d.is_empty() {
        return 0.0;
    }
    let correct = (0..d.len()).filter(|&i| model.predict(d.x(i)) == d.y(i)).count();
    correct as f64 / d.len() as f64
}
