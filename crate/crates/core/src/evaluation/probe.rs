use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Fewest samples per class a probe accepts.
pub const MIN_PER_CLASS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Seed of the stratified 80/20 split.
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 0.5,
            epochs: 300,
            seed: 0,
        }
    }
}

/// Stratified train/holdout partition of sample indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub holdout: Vec<usize>,
}

impl Split {
    /// Holds out a fifth of every class (at least one sample), chosen by `seed`.
    pub fn stratified(labels: &[usize], classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::new();
        let mut holdout = Vec::new();
        for c in 0..classes {
            let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            idx.shuffle(&mut rng);
            let k = (idx.len() / 5).max(1);
            holdout.extend_from_slice(&idx[..k]);
            train.extend_from_slice(&idx[k..]);
        }
        train.sort_unstable();
        holdout.sort_unstable();
        Self { train, holdout }
    }
}

/// Linear softmax classifier over standardized features. The standardization
/// statistics belong to the classifier and stay fixed once trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeClassifier {
    /// `[h × L]`
    pub weights: Tensor,
    pub bias: Vec<f64>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub config: ProbeConfig,
}

/// Accuracy and confusion counts (`[true][predicted]`) on some samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
}

pub(crate) fn check_labels(x: &Tensor, labels: &[usize]) -> Result<usize> {
    if x.shape().len() != 2 || x.rows() != labels.len() {
        return Err(Error::Protocol(format!(
            "{} labels for embeddings of shape {:?}",
            labels.len(),
            x.shape()
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; classes];
    labels.iter().for_each(|&l| counts[l] += 1);
    let present = counts.iter().filter(|&&c| c > 0).count();
    if present < 2 {
        return Err(Error::Protocol("need at least two languages".into()));
    }
    if let Some((c, n)) = counts.iter().enumerate().find(|(_, &n)| n < MIN_PER_CLASS) {
        return Err(Error::Protocol(format!(
            "language {c} has {n} samples, need at least {MIN_PER_CLASS}"
        )));
    }
    Ok(classes)
}

impl ProbeClassifier {
    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    fn logits(&self, row: &[f64]) -> Vec<f64> {
        let l = self.classes();
        let w = self.weights.data();
        let mut out = self.bias.clone();
        for (j, &v) in row.iter().enumerate() {
            let z = (v - self.mean[j]) * self.scale[j];
            for (c, o) in out.iter_mut().enumerate() {
                *o += z * w[j * l + c];
            }
        }
        out
    }

    pub fn predict(&self, row: &[f64]) -> usize {
        let logits = self.logits(row);
        let mut best = 0;
        for (c, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = c;
            }
        }
        best
    }

    /// Scores the rows `indices` of `x`.
    pub fn evaluate(&self, x: &Tensor, labels: &[usize], indices: &[usize]) -> Evaluation {
        let l = self.classes();
        let mut confusion = vec![vec![0; l]; l];
        let mut correct = 0;
        for &i in indices {
            let p = self.predict(x.row(i));
            confusion[labels[i]][p] += 1;
            correct += usize::from(p == labels[i]);
        }
        Evaluation {
            accuracy: correct as f64 / indices.len().max(1) as f64,
            confusion,
        }
    }

    /// Full-batch gradient descent on the rows `train` of `x`.
    pub fn fit(x: &Tensor, labels: &[usize], classes: usize, train: &[usize], config: ProbeConfig) -> Self {
        let h = x.cols();
        let n = train.len() as f64;
        let mut mean = vec![0.0; h];
        for &i in train {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; h];
        for &i in train {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale: Vec<f64> = var
            .iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    1.0 / sd
                } else {
                    0.0
                }
            })
            .collect();
        let z: Vec<Vec<f64>> = train
            .iter()
            .map(|&i| {
                x.row(i)
                    .iter()
                    .zip(&mean)
                    .zip(&scale)
                    .map(|((v, m), s)| (v - m) * s)
                    .collect()
            })
            .collect();
        let l = classes;
        let mut w = vec![0.0; h * l];
        let mut b = vec![0.0; l];
        for _ in 0..config.epochs {
            let mut gw = vec![0.0; h * l];
            let mut gb = vec![0.0; l];
            for (row, &i) in z.iter().zip(train) {
                let mut p = b.clone();
                for (j, v) in row.iter().enumerate() {
                    for c in 0..l {
                        p[c] += v * w[j * l + c];
                    }
                }
                crate::numerics::kernels::softmax_row(&mut p);
                p[labels[i]] -= 1.0;
                for (j, v) in row.iter().enumerate() {
                    for c in 0..l {
                        gw[j * l + c] += v * p[c];
                    }
                }
                for c in 0..l {
                    gb[c] += p[c];
                }
            }
            for (wi, g) in w.iter_mut().zip(&gw) {
                *wi -= config.lr * g / n;
            }
            for (bi, g) in b.iter_mut().zip(&gb) {
                *bi -= config.lr * g / n;
            }
        }
        Self {
            weights: Tensor::raw(vec![h, l], w),
            bias: b,
            mean,
            scale,
            config,
        }
    }
}

/// Trains a probe on the seeded stratified 80% split and returns it with
/// its accuracy on the held-out 20%.
pub fn train_probe(
    embeddings: &Tensor,
    labels: &[usize],
    config: ProbeConfig,
) -> Result<(ProbeClassifier, Evaluation, Split)> {
    let classes = check_labels(embeddings, labels)?;
    let split = Split::stratified(labels, classes, config.seed);
    let probe = ProbeClassifier::fit(embeddings, labels, classes, &split.train, config);
    let eval = probe.evaluate(embeddings, labels, &split.holdout);
    Ok((probe, eval, split))
}
