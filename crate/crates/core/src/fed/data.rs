//! Labelled datasets, label histograms and non-iid partitioning.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::FedError;

/// Additive smoothing applied to label histograms before KL divergence.
pub const HISTOGRAM_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n_features: usize,
    n_classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(n_features: usize, n_classes: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self, FedError> {
        if n_features == 0 || n_classes == 0 {
            return Err(FedError::InvalidDataset("need at least one feature and one class".into()));
        }
        if features.len() != labels.len() * n_features {
            return Err(FedError::InvalidDataset(format!(
                "{} feature values for {} samples of width {n_features}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(FedError::InvalidDataset(format!("label {bad} outside [0, {n_classes})")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(FedError::InvalidDataset("non-finite feature value".into()));
        }
        Ok(Self { n_features, n_classes, features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn y(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        for &i in indices {
            features.extend_from_slice(self.x(i));
        }
        Dataset {
            n_features: self.n_features,
            n_classes: self.n_classes,
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Splits off the last `test_fraction` of a seeded shuffle as a test set.
    pub fn train_test_split(&self, test_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = ((self.len() as f64) * test_fraction).round() as usize;
        let (train, test) = idx.split_at(self.len() - n_test.min(self.len()));
        (self.subset(train), self.subset(test))
    }

    pub fn histogram(&self) -> LabelHistogram {
        LabelHistogram::from_labels(&self.labels, self.n_classes)
    }

    /// Fixture format: a `n_samples,n_features,n_classes` header line, then
    /// one `label,x_1,...,x_F` row per sample.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},{},{}\n", self.len(), self.n_features, self.n_classes);
        for i in 0..self.len() {
            let _ = write!(out, "{}", self.labels[i]);
            for v in self.x(i) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, FedError> {
        let bad = |msg: String| FedError::InvalidDataset(msg);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty fixture".into()))?;
        let dims: Vec<usize> = header
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| bad(format!("bad header {header:?}: {e}")))?;
        let [n, f, c] = dims[..] else {
            return Err(bad(format!("header needs 3 fields, got {header:?}")));
        };
        let mut features = Vec::with_capacity(n * f);
        let mut labels = Vec::with_capacity(n);
        for (row, line) in lines.enumerate() {
            let mut fields = line.split(',');
            let y = fields
                .next()
                .and_then(|s| s.trim().parse::<usize>().ok())
                .ok_or_else(|| bad(format!("row {row}: bad label")))?;
            labels.push(y);
            let before = features.len();
            for s in fields {
                features.push(s.trim().parse::<f64>().map_err(|e| bad(format!("row {row}: {e}")))?);
            }
            if features.len() - before != f {
                return Err(bad(format!("row {row}: expected {f} features")));
            }
        }
        if labels.len() != n {
            return Err(bad(format!("header promises {n} samples, found {}", labels.len())));
        }
        Dataset::new(f, c, features, labels)
    }

    pub fn load(path: &Path) -> Result<Self, FedError> {
        let text = std::fs::read_to_string(path).map_err(|e| FedError::Io(format!("{}: {e}", path.display())))?;
        Self::from_csv(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), FedError> {
        std::fs::write(path, self.to_csv()).map_err(|e| FedError::Io(format!("{}: {e}", path.display())))
    }
}

/// Parameters of the bundled synthetic classification generator: one
/// Gaussian prototype per class, samples scattered around it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub n_features: usize,
    pub n_classes: usize,
    /// Standard deviation of the class prototypes.
    pub separation: f64,
    /// Standard deviation of samples around their prototype.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// Roughly MNIST-subset shaped: 10 balanced classes, ~2k samples.
    fn default() -> Self {
        Self { n_samples: 2000, n_features: 16, n_classes: 10, separation: 1.0, noise: 1.0, seed: 2024 }
    }
}

pub fn synthetic_dataset(spec: &SyntheticSpec) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let proto = Normal::new(0.0, spec.separation).expect("separation is finite");
    let noise = Normal::new(0.0, spec.noise).expect("noise is finite");
    let prototypes: Vec<f64> = (0..spec.n_classes * spec.n_features).map(|_| proto.sample(&mut rng)).collect();
    let mut labels: Vec<usize> = (0..spec.n_samples).map(|i| i % spec.n_classes).collect();
    labels.shuffle(&mut rng);
    let mut features = Vec::with_capacity(spec.n_samples * spec.n_features);
    for &y in &labels {
        for k in 0..spec.n_features {
            features.push(prototypes[y * spec.n_features + k] + noise.sample(&mut rng));
        }
    }
    Dataset { n_features: spec.n_features, n_classes: spec.n_classes, features, labels }
}

/// Label frequencies of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelHistogram {
    freq: Vec<f64>,
}

impl LabelHistogram {
    pub fn new(freq: Vec<f64>) -> Result<Self, FedError> {
        let total: f64 = freq.iter().sum();
        if freq.is_empty() || freq.iter().any(|f| !(f.is_finite() && *f >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(FedError::InvalidHistogram);
        }
        Ok(Self { freq })
    }

    pub fn from_labels(labels: &[usize], n_classes: usize) -> Self {
        let mut freq = vec![0.0; n_classes];
        for &y in labels {
            freq[y] += 1.0;
        }
        let n = labels.len().max(1) as f64;
        freq.iter_mut().for_each(|f| *f /= n);
        Self { freq }
    }

    pub fn uniform(n_classes: usize) -> Self {
        Self { freq: vec![1.0 / n_classes as f64; n_classes] }
    }

    /// Adds `eps` to every entry and renormalises.
    pub fn smoothed(&self, eps: f64) -> Self {
        let total: f64 = self.freq.iter().map(|f| f + eps).sum();
        Self { freq: self.freq.iter().map(|f| (f + eps) / total).collect() }
    }

    pub fn freq(&self) -> &[f64] {
        &self.freq
    }

    pub fn classes(&self) -> usize {
        self.freq.len()
    }
}

/// Composition of one partition produced by [`partition_with_profile`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartSpec {
    pub size: usize,
    /// Weight of the one-hot component in the part's label distribution.
    pub skew: f64,
    pub preferred: usize,
}

/// Target label distribution `(1 - skew) * uniform + skew * onehot(preferred)`.
pub fn mixture_distribution(n_classes: usize, skew: f64, preferred: usize) -> Vec<f64> {
    let base = (1.0 - skew) / n_classes as f64;
    (0..n_classes).map(|c| base + if c == preferred { skew } else { 0.0 }).collect()
}

/// Integer counts summing to `total`, proportional to `dist` by largest
/// remainder; ties go to the lower class index.
fn apportion(total: usize, dist: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = dist.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    for &c in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[c] += 1;
    }
    counts
}

/// Draws parts with the requested sizes and label mixtures. Samples are
/// taken without replacement while a class has unused samples left, with
/// replacement afterwards.
pub fn partition_with_profile(base: &Dataset, parts: &[PartSpec], seed: u64) -> Result<Vec<Dataset>, FedError> {
    if parts.is_empty() {
        return Err(FedError::PartitionUnderflow { samples: base.len(), parts: 0 });
    }
    if parts.iter().any(|p| p.size == 0) {
        return Err(FedError::PartitionUnderflow { samples: base.len(), parts: parts.len() });
    }
    if let Some(p) = parts.iter().find(|p| !(0.0..=1.0).contains(&p.skew)) {
        return Err(FedError::InvalidSkew(p.skew));
    }
    let c = base.n_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &y) in base.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for pool in &mut by_class {
        pool.shuffle(&mut rng);
    }
    let present: Vec<usize> = (0..c).filter(|&k| !by_class[k].is_empty()).collect();
    if present.is_empty() {
        return Err(FedError::PartitionUnderflow { samples: 0, parts: parts.len() });
    }
    let all_by_class = by_class.clone();
    let mut cursor = vec![0usize; c];

    let mut out = Vec::with_capacity(parts.len());
    for spec in parts {
        let mut dist = mixture_distribution(c, spec.skew, spec.preferred % c);
        // Classes absent from the base dataset cannot be drawn.
        for k in 0..c {
            if by_class[k].is_empty() {
                dist[k] = 0.0;
            }
        }
        let mass: f64 = dist.iter().sum();
        dist.iter_mut().for_each(|p| *p /= mass);
        let counts = apportion(spec.size, &dist);
        let mut idx = Vec::with_capacity(spec.size);
        for (k, &want) in counts.iter().enumerate() {
            for _ in 0..want {
                if cursor[k] < by_class[k].len() {
                    idx.push(by_class[k][cursor[k]]);
                    cursor[k] += 1;
                } else {
                    idx.push(all_by_class[k][rng.gen_range(0..all_by_class[k].len())]);
                }
            }
        }
        idx.shuffle(&mut rng);
        out.push(base.subset(&idx));
    }
    Ok(out)
}

/// Splits `base` into `n_parts` equal-size parts whose label distribution
/// is `(1 - alpha) * uniform + alpha * onehot(j mod C)` for part `j`.
pub fn partition_noniid(base: &Dataset, n_parts: usize, alpha: f64, seed: u64) -> Result<Vec<Dataset>, FedError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(FedError::InvalidSkew(alpha));
    }
    if n_parts == 0 || base.len() < n_parts {
        return Err(FedError::PartitionUnderflow { samples: base.len(), parts: n_parts });
    }
    let size = base.len() / n_parts;
    let parts: Vec<PartSpec> = (0..n_parts)
        .map(|j| PartSpec { size, skew: alpha, preferred: j % base.n_classes() })
        .collect();
    partition_with_profile(base, &parts, seed)
}
