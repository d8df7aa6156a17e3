use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;

/// Relative drop of mean per-dimension std that counts as collapse.
pub const STD_RATIO_THRESHOLD: f64 = 1e-3;
/// Effective rank below which embeddings count as collapsed.
pub const RANK_THRESHOLD: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollapseStatus {
    InsufficientData,
    Healthy,
    Collapsed,
}

/// Spread statistics of one batch of sentence embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpreadStats {
    pub mean_std: f64,
    /// Participation ratio of the covariance spectrum, `tr(Σ)² / ‖Σ‖_F²`.
    pub effective_rank: f64,
}

impl SpreadStats {
    /// Statistics of the rows of `x` (`[M × h]`).
    pub fn of(x: &Tensor) -> Self {
        let (m, h) = (x.rows(), x.cols());
        let data = x.data();
        let mut mean = vec![0.0; h];
        for r in 0..m {
            for (j, mu) in mean.iter_mut().enumerate() {
                *mu += data[r * h + j];
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        let mut cov = vec![0.0; h * h];
        for r in 0..m {
            let row = &data[r * h..(r + 1) * h];
            for i in 0..h {
                let a = row[i] - mean[i];
                for j in i..h {
                    cov[i * h + j] += a * (row[j] - mean[j]);
                }
            }
        }
        let mut trace = 0.0;
        let mut frob = 0.0;
        for i in 0..h {
            for j in i..h {
                let c = cov[i * h + j] / m as f64;
                if i == j {
                    trace += c;
                    frob += c * c;
                } else {
                    frob += 2.0 * c * c;
                }
            }
        }
        let mean_std = (0..h).map(|i| (cov[i * h + i] / m as f64).sqrt()).sum::<f64>() / h as f64;
        // spread at rounding-noise level relative to the values counts as none
        let energy = data.iter().map(|v| v * v).sum::<f64>() / m as f64;
        let effective_rank = if trace <= 1e-20 * energy || trace <= f64::MIN_POSITIVE || frob == 0.0 {
            0.0
        } else {
            trace * trace / frob
        };
        Self {
            mean_std,
            effective_rank,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub status: CollapseStatus,
    pub epoch: u64,
    pub batch: u64,
    pub stats: SpreadStats,
    pub initial_std: Option<f64>,
    pub reason: String,
}

/// Watches a stream of embedding batches for loss of spread.
#[derive(Debug, Clone, Default)]
pub struct CollapseMonitor {
    initial_std: Option<f64>,
    observed: u64,
}

impl CollapseMonitor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observed(&self) -> u64 {
        self.observed
    }

    /// Records one batch. The first batch only fixes the reference std.
    pub fn observe(&mut self, embeddings: &Tensor, epoch: u64, batch: u64) -> CollapseReport {
        let stats = SpreadStats::of(embeddings);
        self.observed += 1;
        let report = |status, reason: String, initial_std| CollapseReport {
            status,
            epoch,
            batch,
            stats,
            initial_std,
            reason,
        };
        let Some(initial) = self.initial_std else {
            self.initial_std = Some(stats.mean_std);
            return report(
                CollapseStatus::InsufficientData,
                "first batch sets the reference spread".into(),
                None,
            );
        };
        if stats.mean_std < STD_RATIO_THRESHOLD * initial {
            return report(
                CollapseStatus::Collapsed,
                format!(
                    "mean per-dimension std {:.3e} fell below {STD_RATIO_THRESHOLD:e} of its initial {initial:.3e}",
                    stats.mean_std
                ),
                Some(initial),
            );
        }
        if stats.effective_rank < RANK_THRESHOLD {
            return report(
                CollapseStatus::Collapsed,
                format!("effective rank {:.3} below {RANK_THRESHOLD}", stats.effective_rank),
                Some(initial),
            );
        }
        report(CollapseStatus::Healthy, "ok".into(), Some(initial))
    }
}
