//! Confusion matrices, accuracy/precision/recall/F1, and two small native
//! classifiers with a versioned binary model format.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};

/// Counts with rows = true class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    /// Row-major `k x k` counts.
    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(Error::Shape(format!("{} counts for {k} classes", counts.len())));
        }
        Ok(Self { k, counts })
    }

    pub fn from_indices(k: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Shape(format!(
                "{} true labels vs {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut cm = Self::zeros(k);
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= k || p >= k {
                return Err(Error::UnknownLabel(format!("class index {}", t.max(p))));
            }
            cm.counts[t * k + p] += 1;
        }
        Ok(cm)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.k + predicted]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    /// Relabels classes: class `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = Self::zeros(self.k);
        for i in 0..self.k {
            for j in 0..self.k {
                out.counts[perm[i] * self.k + perm[j]] = self.get(i, j);
            }
        }
        out
    }

    pub fn write_csv<W: Write>(&self, mut w: W, labels: &[String]) -> std::io::Result<()> {
        write!(w, "true\\predicted")?;
        for l in labels {
            write!(w, ",{l}")?;
        }
        writeln!(w)?;
        for (i, l) in labels.iter().enumerate() {
            write!(w, "{l}")?;
            for j in 0..self.k {
                write!(w, ",{}", self.get(i, j))?;
            }
            writeln!(w)?;
        }
        w.flush()
    }
}

/// Confusion matrix over string labels drawn from `label_set`.
pub fn confusion(truth: &[String], predicted: &[String], label_set: &[String]) -> Result<ConfusionMatrix> {
    if truth.is_empty() {
        return Err(Error::InvalidArgument("confusion matrix needs at least one sample".into()));
    }
    let index = |l: &String| {
        label_set
            .iter()
            .position(|x| x == l)
            .ok_or_else(|| Error::UnknownLabel(l.clone()))
    };
    let t: Vec<usize> = truth.iter().map(index).collect::<Result<_>>()?;
    let p: Vec<usize> = predicted.iter().map(index).collect::<Result<_>>()?;
    ConfusionMatrix::from_indices(label_set.len(), &t, &p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Accuracy and macro-averaged precision, recall and F1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// One-vs-rest TP, FP, FN, TN per class, accuracy = trace / total. A class
/// never predicted has precision 0; F1 is 0 when precision + recall is 0.
pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if cm.k == 0 || total == 0 {
        return Err(Error::InvalidArgument("confusion matrix is empty".into()));
    }
    let k = cm.k;
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let tp = cm.get(c, c);
        let col: u64 = (0..k).map(|i| cm.get(i, c)).sum();
        let row: u64 = (0..k).map(|j| cm.get(c, j)).sum();
        let precision = ratio(tp, col);
        let recall = ratio(tp, row);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassMetrics { precision, recall, f1 });
    }
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
    Ok(MetricsReport {
        accuracy: ratio(cm.trace(), total),
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
        per_class,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    NearestCentroid,
    MultinomialLogistic,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest_centroid" | "centroid" => Ok(Self::NearestCentroid),
            "multinomial_logistic" | "logistic" => Ok(Self::MultinomialLogistic),
            other => Err(Error::InvalidArgument(format!("unknown classifier {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
    /// Standard deviation of the initial logistic weights; 0 starts from zero.
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 500,
            l2: 1e-4,
            seed: 0,
            init_scale: 0.0,
        }
    }
}

/// A trained classifier. Features are standardized with the stored training
/// mean and scale before scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub kind: ModelKind,
    pub labels: Vec<String>,
    pub dim: usize,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Centroids (`k x dim`) or weights with a trailing bias (`k x (dim + 1)`),
    /// row-major.
    pub params: Vec<f64>,
    /// Free-form context saved with the model.
    pub metadata: BTreeMap<String, serde_json::Value>,
}

fn check_features(features: &[Vec<f64>]) -> Result<usize> {
    let dim = features
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::InvalidArgument("no samples".into()))?;
    for (i, f) in features.iter().enumerate() {
        if f.len() != dim {
            return Err(Error::Shape(format!("sample {i} has {} features, expected {dim}", f.len())));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("sample {i} has non-finite features")));
        }
    }
    Ok(dim)
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

pub fn train(features: &[Vec<f64>], labels: &[String], kind: ModelKind, config: &TrainConfig) -> Result<ClassifierModel> {
    let dim = check_features(features)?;
    if labels.len() != features.len() {
        return Err(Error::Shape(format!("{} labels for {} samples", labels.len(), features.len())));
    }
    let mut label_set: Vec<String> = labels.to_vec();
    label_set.sort();
    label_set.dedup();
    if label_set.len() < 2 {
        return Err(Error::InvalidArgument("training needs at least two classes".into()));
    }
    if !(config.learning_rate > 0.0 && config.l2 >= 0.0 && config.init_scale >= 0.0) {
        return Err(Error::InvalidArgument("learning rate must be positive and l2, init scale nonnegative".into()));
    }
    let y: Vec<usize> = labels
        .iter()
        .map(|l| label_set.binary_search(l).expect("label set built from labels"))
        .collect();
    let n = features.len() as f64;
    let mut mean = vec![0.0; dim];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v / n;
        }
    }
    let mut scale = vec![0.0; dim];
    for f in features {
        for ((s, v), m) in scale.iter_mut().zip(f).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    for s in scale.iter_mut() {
        *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
    }
    let x: Vec<Vec<f64>> = features
        .iter()
        .map(|f| f.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s).collect())
        .collect();
    let k = label_set.len();
    let params = match kind {
        ModelKind::NearestCentroid => {
            let mut sums = vec![0.0; k * dim];
            let mut counts = vec![0usize; k];
            for (xi, &yi) in x.iter().zip(&y) {
                counts[yi] += 1;
                for (s, v) in sums[yi * dim..(yi + 1) * dim].iter_mut().zip(xi) {
                    *s += v;
                }
            }
            for c in 0..k {
                for s in &mut sums[c * dim..(c + 1) * dim] {
                    *s /= counts[c] as f64;
                }
            }
            sums
        }
        ModelKind::MultinomialLogistic => fit_logistic(&x, &y, k, dim, config),
    };
    Ok(ClassifierModel {
        kind,
        labels: label_set,
        dim,
        mean,
        scale,
        params,
        metadata: BTreeMap::new(),
    })
}

/// Full-batch gradient descent on the mean cross-entropy plus
/// `l2/2 · |W|²` (biases unpenalized).
fn fit_logistic(x: &[Vec<f64>], y: &[usize], k: usize, dim: usize, config: &TrainConfig) -> Vec<f64> {
    let stride = dim + 1;
    let mut w = vec![0.0; k * stride];
    if config.init_scale > 0.0 {
        let mut rng = rng_from_seed(derive_seed(config.seed, &[0x4c47]));
        for c in 0..k {
            for j in 0..dim {
                let z: f64 = StandardNormal.sample(&mut rng);
                w[c * stride + j] = config.init_scale * z;
            }
        }
    }
    let n = x.len() as f64;
    let mut grad = vec![0.0; k * stride];
    let mut z = vec![0.0; k];
    for _ in 0..config.epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (xi, &yi) in x.iter().zip(y) {
            for c in 0..k {
                let row = &w[c * stride..(c + 1) * stride];
                z[c] = row[dim] + row[..dim].iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
            }
            softmax_in_place(&mut z);
            z[yi] -= 1.0;
            for c in 0..k {
                let g = &mut grad[c * stride..(c + 1) * stride];
                for (gj, xj) in g[..dim].iter_mut().zip(xi) {
                    *gj += z[c] * xj;
                }
                g[dim] += z[c];
            }
        }
        for c in 0..k {
            for j in 0..stride {
                let idx = c * stride + j;
                let reg = if j < dim { config.l2 * w[idx] } else { 0.0 };
                w[idx] -= config.learning_rate * (grad[idx] / n + reg);
            }
        }
    }
    w
}

impl ClassifierModel {
    pub fn n_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn standardize(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::Shape(format!("expected {} features, got {}", self.dim, x.len())));
        }
        Ok(x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect())
    }

    /// Class scores: negative squared distance to each centroid, or logits.
    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        let z = self.standardize(x)?;
        let d = self.dim;
        Ok(match self.kind {
            ModelKind::NearestCentroid => (0..self.n_classes())
                .map(|c| {
                    -self.params[c * d..(c + 1) * d]
                        .iter()
                        .zip(&z)
                        .map(|(m, v)| (v - m).powi(2))
                        .sum::<f64>()
                })
                .collect(),
            ModelKind::MultinomialLogistic => (0..self.n_classes())
                .map(|c| {
                    let row = &self.params[c * (d + 1)..(c + 1) * (d + 1)];
                    row[d] + row[..d].iter().zip(&z).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect(),
        })
    }

    /// Index of the highest score; ties go to the smallest index.
    pub fn predict_index(&self, x: &[f64]) -> Result<usize> {
        let s = self.scores(x)?;
        let mut best = 0;
        for c in 1..s.len() {
            if s[c] > s[best] {
                best = c;
            }
        }
        Ok(best)
    }

    pub fn predict(&self, x: &[f64]) -> Result<&str> {
        Ok(&self.labels[self.predict_index(x)?])
    }
}

pub fn evaluate(model: &ClassifierModel, features: &[Vec<f64>], labels: &[String]) -> Result<(MetricsReport, ConfusionMatrix)> {
    if features.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    if features.len() != labels.len() {
        return Err(Error::Shape(format!("{} labels for {} samples", labels.len(), features.len())));
    }
    let predicted: Vec<String> = features
        .iter()
        .map(|f| model.predict(f).map(str::to_owned))
        .collect::<Result<_>>()?;
    let cm = confusion(labels, &predicted, &model.labels)?;
    Ok((metrics(&cm)?, cm))
}

/// Seeded per-class split: each class contributes `round(train_fraction · n_c)`
/// samples to training (at least one, and at least one held out when the
/// class has two or more). Returns sorted index lists.
pub fn stratified_split(labels: &[String], train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("train fraction {train_fraction} not in (0, 1)")));
    }
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (ci, (_, mut idx)) in by_class.into_iter().enumerate() {
        let mut rng = rng_from_seed(derive_seed(seed, &[0x5350, ci as u64]));
        idx.shuffle(&mut rng);
        let n = idx.len();
        let mut n_train = ((train_fraction * n as f64).round() as usize).max(1);
        if n >= 2 {
            n_train = n_train.min(n - 1);
        }
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub const MODEL_MAGIC: &[u8; 4] = b"CSIM";
pub const MODEL_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    kind: ModelKind,
    dim: usize,
    labels: Vec<String>,
    params_len: usize,
    metadata: BTreeMap<String, serde_json::Value>,
}

impl ClassifierModel {
    /// Layout: magic `CSIM`, version u16, header length u32, JSON header
    /// (kind, dim, labels, params_len, metadata), then little-endian f64
    /// mean, scale and parameter arrays.
    pub fn write_blob<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::to_vec(&ModelHeader {
            kind: self.kind,
            dim: self.dim,
            labels: self.labels.clone(),
            params_len: self.params.len(),
            metadata: self.metadata.clone(),
        })?;
        let mut buf = Vec::with_capacity(10 + header.len() + 8 * (2 * self.dim + self.params.len()));
        buf.extend_from_slice(MODEL_MAGIC);
        buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        for v in self.mean.iter().chain(&self.scale).chain(&self.params) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).and_then(|_| w.flush()).map_err(|e| Error::io("<model>", e))
    }

    pub fn read_blob<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::io("<model>", e))?;
        if bytes.len() < 10 || &bytes[..4] != MODEL_MAGIC {
            return Err(Error::Format("missing model magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported model version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let body = bytes.get(10..10 + hlen).ok_or_else(|| Error::Corrupt("model header truncated".into()))?;
        let h: ModelHeader = serde_json::from_slice(body)?;
        let k = h.labels.len();
        let expected = match h.kind {
            ModelKind::NearestCentroid => k * h.dim,
            ModelKind::MultinomialLogistic => k * (h.dim + 1),
        };
        if h.params_len != expected || k < 2 {
            return Err(Error::Corrupt(format!(
                "{} parameters do not fit {k} classes of dimension {}",
                h.params_len, h.dim
            )));
        }
        let data = &bytes[10 + hlen..];
        let count = 2 * h.dim + h.params_len;
        if data.len() != 8 * count {
            return Err(Error::Corrupt(format!("expected {count} parameters, payload has {} bytes", data.len())));
        }
        let values: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self {
            kind: h.kind,
            labels: h.labels,
            dim: h.dim,
            mean: values[..h.dim].to_vec(),
            scale: values[h.dim..2 * h.dim].to_vec(),
            params: values[2 * h.dim..].to_vec(),
            metadata: h.metadata,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    /// Independent per-class computation straight from the definitions.
    pub(crate) fn brute_metrics(k: usize, counts: &[u64]) -> (f64, Vec<(f64, f64, f64)>) {
        let total: u64 = counts.iter().sum();
        let mut per = Vec::new();
        let mut acc_num = 0u64;
        for c in 0..k {
            let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
            for t in 0..k {
                for p in 0..k {
                    let n = counts[t * k + p];
                    match (t == c, p == c) {
                        (true, true) => tp += n,
                        (false, true) => fp += n,
                        (true, false) => fn_ += n,
                        (false, false) => tn += n,
                    }
                }
            }
            assert_eq!(tp + fp + fn_ + tn, total);
            acc_num += tp;
            let pr = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            let rc = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
            let f1 = if pr + rc == 0.0 { 0.0 } else { 2.0 * pr * rc / (pr + rc) };
            per.push((pr, rc, f1));
        }
        (acc_num as f64 / total as f64, per)
    }

    #[test]
    fn confusion_examples() {
        let labels = s(&["a", "b", "c"]);
        let cm = confusion(&s(&["a", "b", "c"]), &s(&["a", "b", "c"]), &labels).unwrap();
        assert_eq!(cm.counts(), &[1, 0, 0, 0, 1, 0, 0, 0, 1]);
        let cm = confusion(&s(&["a", "b", "c", "c"]), &s(&["a", "a", "a", "a"]), &labels).unwrap();
        assert_eq!(cm.counts(), &[1, 0, 0, 1, 0, 0, 2, 0, 0]);
        let truth = s(&["a", "a", "b", "c", "c", "b"]);
        let pred = s(&["a", "b", "b", "c", "a", "b"]);
        let cm = confusion(&truth, &pred, &labels).unwrap();
        let mut manual = [0u64; 9];
        for (t, p) in truth.iter().zip(&pred) {
            let ti = labels.iter().position(|l| l == t).unwrap();
            let pi = labels.iter().position(|l| l == p).unwrap();
            manual[ti * 3 + pi] += 1;
        }
        assert_eq!(cm.counts(), &manual);
        assert!(matches!(confusion(&s(&["z"]), &s(&["a"]), &labels), Err(Error::UnknownLabel(_))));
        assert!(confusion(&[], &[], &labels).is_err());
    }

    #[test]
    fn binary_case() {
        // class 0 = positive: TP=3, FN=1, FP=1, TN=5
        let cm = ConfusionMatrix::from_counts(2, vec![3, 1, 1, 5]).unwrap();
        let m = metrics(&cm).unwrap();
        let pos = m.per_class[0];
        assert!((pos.precision - 0.75).abs() < 1e-15);
        assert!((pos.recall - 0.75).abs() < 1e-15);
        assert!((pos.f1 - 0.75).abs() < 1e-15);
        assert!((m.accuracy - 0.8).abs() < 1e-15);
    }

    #[test]
    fn diagonal_is_perfect_and_empty_errors() {
        let m = metrics(&ConfusionMatrix::from_counts(3, vec![4, 0, 0, 0, 2, 0, 0, 0, 7]).unwrap()).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
        assert!(metrics(&ConfusionMatrix::zeros(3)).is_err());
    }

    #[test]
    fn never_predicted_class_has_zero_precision() {
        let m = metrics(&ConfusionMatrix::from_counts(2, vec![2, 0, 3, 0]).unwrap()).unwrap();
        assert_eq!(m.per_class[1].precision, 0.0);
        assert_eq!(m.per_class[1].f1, 0.0);
    }

    #[test]
    fn random_matrices_match_brute_force() {
        let mut rng = rng_from_seed(7);
        for _ in 0..200 {
            let k = rng.random_range(2..6);
            let counts: Vec<u64> = (0..k * k).map(|_| rng.random_range(0..20)).collect();
            if counts.iter().sum::<u64>() == 0 {
                continue;
            }
            let m = metrics(&ConfusionMatrix::from_counts(k, counts.clone()).unwrap()).unwrap();
            let (acc, per) = brute_metrics(k, &counts);
            assert!((m.accuracy - acc).abs() < 1e-12);
            for (a, b) in m.per_class.iter().zip(&per) {
                assert!((a.precision - b.0).abs() < 1e-12);
                assert!((a.recall - b.1).abs() < 1e-12);
                assert!((a.f1 - b.2).abs() < 1e-12);
            }
            let macro_f1 = per.iter().map(|p| p.2).sum::<f64>() / k as f64;
            assert!((m.f1 - macro_f1).abs() < 1e-12);
        }
    }

    fn blobs(seed: u64, n: usize, sep: f64) -> (Vec<Vec<f64>>, Vec<String>) {
        let mut rng = rng_from_seed(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let centre = if c == 0 { -sep } else { sep };
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            x.push(vec![centre + 0.3 * a, 5.0 + 0.3 * b]);
            y.push(if c == 0 { "neg".to_string() } else { "pos".to_string() });
        }
        (x, y)
    }

    #[test]
    fn separable_blobs_train_perfectly() {
        let (x, y) = blobs(1, 60, 2.0);
        for kind in [ModelKind::NearestCentroid, ModelKind::MultinomialLogistic] {
            let m = train(&x, &y, kind, &TrainConfig::default()).unwrap();
            let (report, _) = evaluate(&m, &x, &y).unwrap();
            assert_eq!(report.accuracy, 1.0, "{kind:?}");
        }
    }

    #[test]
    fn constant_features_fall_back_to_prior() {
        let x = vec![vec![1.0, 2.0]; 10];
        let y: Vec<String> = (0..10).map(|i| if i < 7 { "a".into() } else { "b".into() }).collect();
        let m = train(&x, &y, ModelKind::MultinomialLogistic, &TrainConfig::default()).unwrap();
        assert!(x.iter().all(|f| m.predict(f).unwrap() == "a"));
        let s = m.scores(&x[0]).unwrap();
        // biases approach the log prior ratio
        assert!(((s[0] - s[1]) - (0.7f64 / 0.3).ln()).abs() < 0.1);
    }

    #[test]
    fn train_errors() {
        let x = vec![vec![1.0], vec![2.0]];
        assert!(train(&x, &s(&["a", "a"]), ModelKind::NearestCentroid, &TrainConfig::default()).is_err());
        assert!(train(&[vec![1.0], vec![f64::NAN]], &s(&["a", "b"]), ModelKind::NearestCentroid, &TrainConfig::default()).is_err());
        assert!(train(&[vec![1.0], vec![1.0, 2.0]], &s(&["a", "b"]), ModelKind::NearestCentroid, &TrainConfig::default()).is_err());
        let m = train(&x, &s(&["a", "b"]), ModelKind::NearestCentroid, &TrainConfig::default()).unwrap();
        assert!(m.predict(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let (x, y) = blobs(3, 40, 0.5);
        let cfg = TrainConfig {
            init_scale: 0.1,
            seed: 9,
            epochs: 50,
            ..TrainConfig::default()
        };
        let a = train(&x, &y, ModelKind::MultinomialLogistic, &cfg).unwrap();
        let b = train(&x, &y, ModelKind::MultinomialLogistic, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn centroid_predictions_and_ties() {
        let x = vec![vec![0.0], vec![2.0], vec![4.0], vec![6.0]];
        let y = s(&["left", "left", "right", "right"]);
        let m = train(&x, &y, ModelKind::NearestCentroid, &TrainConfig::default()).unwrap();
        assert_eq!(m.predict(&[1.0]).unwrap(), "left");
        assert_eq!(m.predict(&[5.0]).unwrap(), "right");
        assert_eq!(m.predict(&[3.0]).unwrap(), "left", "equidistant goes to the smaller index");
    }

    #[test]
    fn logistic_scores_are_dot_products() {
        let m = ClassifierModel {
            kind: ModelKind::MultinomialLogistic,
            labels: s(&["a", "b", "c"]),
            dim: 2,
            mean: vec![0.0, 0.0],
            scale: vec![1.0, 1.0],
            params: vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.5, 2.0, 2.0, -1.0],
            metadata: BTreeMap::new(),
        };
        let x = [1.0, 1.5];
        // a: 1, b: 1.5 + 0.5 = 2, c: 2 + 3 - 1 = 4
        assert_eq!(m.scores(&x).unwrap(), vec![1.0, 2.0, 4.0]);
        assert_eq!(m.predict(&x).unwrap(), "c");
    }

    #[test]
    fn affine_rescaling_does_not_change_predictions() {
        let (x, y) = blobs(5, 50, 1.0);
        let rescale = |v: &Vec<f64>| vec![-3.0 * v[0] + 10.0, 0.01 * v[1] - 7.0];
        let x2: Vec<Vec<f64>> = x.iter().map(rescale).collect();
        let probe: Vec<Vec<f64>> = blobs(6, 30, 1.0).0;
        for kind in [ModelKind::NearestCentroid, ModelKind::MultinomialLogistic] {
            let a = train(&x, &y, kind, &TrainConfig::default()).unwrap();
            let b = train(&x2, &y, kind, &TrainConfig::default()).unwrap();
            for p in &probe {
                assert_eq!(a.predict_index(p).unwrap(), b.predict_index(&rescale(p)).unwrap());
                if kind == ModelKind::MultinomialLogistic {
                    let (sa, sb) = (a.scores(p).unwrap(), b.scores(&rescale(p)).unwrap());
                    for (u, v) in sa.iter().zip(&sb) {
                        assert!((u - v).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn permutation_null_accuracy_near_chance() {
        let k = 4;
        let n = 400;
        let mut rng = rng_from_seed(11);
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..3).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let mut y: Vec<String> = (0..n).map(|i| format!("c{}", i % k)).collect();
        y.shuffle(&mut rng);
        let (tr, te) = stratified_split(&y, 0.5, 2).unwrap();
        let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<String>) {
            (idx.iter().map(|&i| x[i].clone()).collect(), idx.iter().map(|&i| y[i].clone()).collect())
        };
        let (xtr, ytr) = pick(&tr);
        let (xte, yte) = pick(&te);
        let m = train(&xtr, &ytr, ModelKind::NearestCentroid, &TrainConfig::default()).unwrap();
        let (report, _) = evaluate(&m, &xte, &yte).unwrap();
        let p = 1.0 / k as f64;
        let sd = (p * (1.0 - p) / te.len() as f64).sqrt();
        assert!((report.accuracy - p).abs() < 3.0 * sd, "{}", report.accuracy);
    }

    #[test]
    fn split_is_stratified_and_seeded() {
        let y: Vec<String> = (0..200).map(|i| format!("c{}", i % 4)).collect();
        let (tr, te) = stratified_split(&y, 0.8, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (160, 40));
        for c in 0..4 {
            let name = format!("c{c}");
            assert_eq!(te.iter().filter(|&&i| y[i] == name).count(), 10);
        }
        assert_eq!(stratified_split(&y, 0.8, 3).unwrap(), (tr.clone(), te));
        assert_ne!(stratified_split(&y, 0.8, 4).unwrap().0, tr);
        assert!(stratified_split(&y, 1.0, 3).is_err());
    }

    #[test]
    fn blob_round_trip_and_errors() {
        let (x, y) = blobs(2, 20, 1.0);
        for kind in [ModelKind::NearestCentroid, ModelKind::MultinomialLogistic] {
            let mut m = train(&x, &y, kind, &TrainConfig::default()).unwrap();
            m.metadata.insert("p".into(), serde_json::json!(3));
            let mut buf = Vec::new();
            m.write_blob(&mut buf).unwrap();
            assert_eq!(&buf[..4], b"CSIM");
            assert_eq!(ClassifierModel::read_blob(&buf[..]).unwrap(), m);
            assert!(matches!(ClassifierModel::read_blob(&buf[..buf.len() - 1]), Err(Error::Corrupt(_))));
            let mut bad = buf.clone();
            bad[4] = 9;
            assert!(matches!(ClassifierModel::read_blob(&bad[..]), Err(Error::Format(_))));
        }
    }

    #[test]
    fn confusion_csv_layout() {
        let cm = ConfusionMatrix::from_counts(2, vec![3, 1, 1, 5]).unwrap();
        let mut buf = Vec::new();
        cm.write_csv(&mut buf, &s(&["x", "y"])).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "true\\predicted,x,y\nx,3,1\ny,1,5\n");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn macro_metrics_permutation_invariant(
                counts in proptest::collection::vec(0u64..30, 16),
                perm in Just((0..4usize).collect::<Vec<_>>()).prop_shuffle(),
            ) {
                prop_assume!(counts.iter().sum::<u64>() > 0);
                let cm = ConfusionMatrix::from_counts(4, counts).unwrap();
                let a = metrics(&cm).unwrap();
                let b = metrics(&cm.permuted(&perm)).unwrap();
                prop_assert!((a.accuracy - b.accuracy).abs() < 1e-12);
                prop_assert!((a.precision - b.precision).abs() < 1e-12);
                prop_assert!((a.recall - b.recall).abs() < 1e-12);
                prop_assert!((a.f1 - b.f1).abs() < 1e-12);
                for c in &a.per_class {
                    prop_assert!((0.0..=1.0).contains(&c.precision) && (0.0..=1.0).contains(&c.f1));
                }
            }

            #[test]
            fn accuracy_equals_aggregated_one_vs_rest(counts in proptest::collection::vec(0u64..30, 9)) {
                prop_assume!(counts.iter().sum::<u64>() > 0);
                let cm = ConfusionMatrix::from_counts(3, counts.clone()).unwrap();
                let (acc, _) = brute_metrics(3, &counts);
                prop_assert!((metrics(&cm).unwrap().accuracy - acc).abs() < 1e-12);
            }
        }
    }
}
