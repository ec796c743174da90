//! Linear separability of latent features with respect to motion labels.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::MetricError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub heldout_fraction: f64,
    pub l2: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { heldout_fraction: 0.3, l2: 1e-3, learning_rate: 0.5, iterations: 500, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Held-out accuracy in [0, 1].
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_classes: usize,
    /// `confusion[true][predicted]` on the held-out split.
    pub confusion: Vec<Vec<usize>>,
}

/// Per-class shuffled split so every class appears in both halves whenever it has two samples.
fn stratified_split(labels: &[usize], n_classes: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..n_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let mut k = (idx.len() as f64 * fraction).round() as usize;
        if idx.len() >= 2 {
            k = k.clamp(1, idx.len() - 1);
        }
        test.extend_from_slice(&idx[..k.min(idx.len())]);
        train.extend_from_slice(&idx[k.min(idx.len())..]);
    }
    (train, test)
}

struct Softmax {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Softmax {
    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    fn probabilities(&self, z: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> =
            self.weights.iter().zip(&self.bias).map(|(w, b)| b + w.iter().zip(z).map(|(a, b)| a * b).sum::<f64>()).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exp.iter().sum();
        exp.into_iter().map(|e| e / sum).collect()
    }

    fn predict(&self, x: &[f64]) -> usize {
        let p = self.probabilities(&self.standardize(x));
        (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap_or(0)
    }

    /// Full-batch gradient descent on the L2-regularized cross-entropy.
    fn fit(xs: &[&[f64]], ys: &[usize], n_classes: usize, cfg: &ProbeConfig) -> Self {
        let dim = xs[0].len();
        let n = xs.len() as f64;
        let mut mean = vec![0.0; dim];
        for x in xs {
            for (m, v) in mean.iter_mut().zip(x.iter()) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; dim];
        for x in xs {
            for ((s, v), m) in std.iter_mut().zip(x.iter()).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let std: Vec<f64> = std.into_iter().map(|v| v.sqrt().max(1e-8)).collect();
        let mut model = Softmax { weights: vec![vec![0.0; dim]; n_classes], bias: vec![0.0; n_classes], mean, std };
        let zs: Vec<Vec<f64>> = xs.iter().map(|x| model.standardize(x)).collect();
        for _ in 0..cfg.iterations {
            let mut gw = vec![vec![0.0; dim]; n_classes];
            let mut gb = vec![0.0; n_classes];
            for (z, &y) in zs.iter().zip(ys) {
                let p = model.probabilities(z);
                for c in 0..n_classes {
                    let err = p[c] - if c == y { 1.0 } else { 0.0 };
                    gb[c] += err / n;
                    for (g, v) in gw[c].iter_mut().zip(z) {
                        *g += err * v / n;
                    }
                }
            }
            for c in 0..n_classes {
                model.bias[c] -= cfg.learning_rate * gb[c];
                for (w, g) in model.weights[c].iter_mut().zip(&gw[c]) {
                    *w -= cfg.learning_rate * (g + cfg.l2 * *w);
                }
            }
        }
        model
    }
}

/// Trains a multinomial linear classifier on a stratified train split and reports held-out
/// accuracy. Labels are dense class indices `0..n_classes`.
pub fn latent_probe(features: &[Vec<f64>], labels: &[usize], cfg: &ProbeConfig) -> Result<ProbeResult, MetricError> {
    if features.len() != labels.len() {
        return Err(MetricError::LengthMismatch { pred: features.len(), gt: labels.len() });
    }
    if features.is_empty() {
        return Err(MetricError::InvalidInput("no samples".into()));
    }
    let dim = features[0].len();
    if dim == 0 || features.iter().any(|f| f.len() != dim || f.iter().any(|v| !v.is_finite())) {
        return Err(MetricError::InvalidInput("features must be finite vectors of equal nonzero length".into()));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let present = (0..n_classes).filter(|c| labels.contains(c)).count();
    if present < 2 {
        return Err(MetricError::SingleClass);
    }
    if !(cfg.heldout_fraction > 0.0 && cfg.heldout_fraction < 1.0) {
        return Err(MetricError::InvalidInput(format!("held-out fraction {} not in (0, 1)", cfg.heldout_fraction)));
    }
    let (train, test) = stratified_split(labels, n_classes, cfg.heldout_fraction, cfg.seed);
    if train.is_empty() || test.is_empty() {
        return Err(MetricError::InvalidInput("split left an empty partition".into()));
    }
    let xs: Vec<&[f64]> = train.iter().map(|&i| features[i].as_slice()).collect();
    let ys: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let model = Softmax::fit(&xs, &ys, n_classes, cfg);
    let train_correct = train.iter().filter(|&&i| model.predict(&features[i]) == labels[i]).count();
    let mut confusion = vec![vec![0; n_classes]; n_classes];
    for &i in &test {
        confusion[labels[i]][model.predict(&features[i])] += 1;
    }
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    Ok(ProbeResult {
        accuracy: correct as f64 / test.len() as f64,
        train_accuracy: train_correct as f64 / train.len() as f64,
        n_train: train.len(),
        n_test: test.len(),
        n_classes,
        confusion,
    })
}

/// Projection onto the two leading principal components, for scatter plots.
pub fn pca_2d(features: &[Vec<f64>]) -> Result<Vec<[f64; 2]>, MetricError> {
    if features.len() < 2 {
        return Err(MetricError::InvalidInput("need at least two samples".into()));
    }
    let dim = features[0].len();
    let n = features.len();
    let x = DMatrix::from_fn(n, dim, |i, j| features[i][j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, dim, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axis = |k: usize| order.get(k).map(|&c| eig.eigenvectors.column(c).into_owned());
    let (a, b) = (axis(0), axis(1));
    Ok((0..n)
        .map(|i| {
            let row = centered.row(i).transpose();
            [a.as_ref().map_or(0.0, |v| v.dot(&row)), b.as_ref().map_or(0.0, |v| v.dot(&row))]
        })
        .collect())
}
