use serde::{Deserialize, Serialize};

use super::probe::{check_labels, Evaluation, ProbeClassifier, ProbeConfig, Split};
use crate::data::subtract_centroid;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Ce,
    Centroid,
}

/// Accuracies of the three language classifiers:
/// `a1` trained and tested on baseline embeddings, `a2` the same frozen
/// classifier tested on enhanced embeddings, `a3` a classifier trained and
/// tested on enhanced embeddings. All use the same held-out rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolResult {
    pub variant: Variant,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub n_samples: usize,
    pub languages: Vec<String>,
    pub confusion_a1: Vec<Vec<usize>>,
    pub confusion_a2: Vec<Vec<usize>>,
    pub confusion_a3: Vec<Vec<usize>>,
}

impl ProtocolResult {
    /// Whether `a2 < a3 < a1` holds. Reported, not required.
    pub fn ordering_holds(&self) -> bool {
        self.a2 < self.a3 && self.a3 < self.a1
    }

    /// `{variant, a1, a2, a3, n_samples, languages}`
    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "variant": self.variant,
            "a1": self.a1,
            "a2": self.a2,
            "a3": self.a3,
            "n_samples": self.n_samples,
            "languages": self.languages,
        })
    }
}

fn language_names(languages: &[String], classes: usize) -> Vec<String> {
    (0..classes)
        .map(|c| languages.get(c).cloned().unwrap_or_else(|| c.to_string()))
        .collect()
}

fn protocol(
    variant: Variant,
    baseline: &Tensor,
    enhanced: &Tensor,
    labels: &[usize],
    languages: &[String],
    config: ProbeConfig,
) -> Result<ProtocolResult> {
    if baseline.shape() != enhanced.shape() {
        return Err(Error::Protocol(format!(
            "baseline {:?} and enhanced {:?} embeddings are not row-aligned",
            baseline.shape(),
            enhanced.shape()
        )));
    }
    let classes = check_labels(baseline, labels)?;
    let split = Split::stratified(labels, classes, config.seed);
    let c1 = ProbeClassifier::fit(baseline, labels, classes, &split.train, config);
    let Evaluation {
        accuracy: a1,
        confusion: confusion_a1,
    } = c1.evaluate(baseline, labels, &split.holdout);
    let Evaluation {
        accuracy: a2,
        confusion: confusion_a2,
    } = c1.evaluate(enhanced, labels, &split.holdout);
    let c2 = ProbeClassifier::fit(enhanced, labels, classes, &split.train, config);
    let Evaluation {
        accuracy: a3,
        confusion: confusion_a3,
    } = c2.evaluate(enhanced, labels, &split.holdout);
    Ok(ProtocolResult {
        variant,
        a1,
        a2,
        a3,
        n_samples: labels.len(),
        languages: language_names(languages, classes),
        confusion_a1,
        confusion_a2,
        confusion_a3,
    })
}

/// Language-classifier protocol comparing embeddings before and after
/// context enhancement. Rows of both matrices must describe the same
/// sentences in the same order.
pub fn run_protocol(
    baseline: &Tensor,
    enhanced: &Tensor,
    labels: &[usize],
    languages: &[String],
    config: ProbeConfig,
) -> Result<ProtocolResult> {
    protocol(Variant::Ce, baseline, enhanced, labels, languages, config)
}

/// The same protocol with the centroid-subtracted embeddings as the
/// enhanced side.
pub fn run_centroid_protocol(
    embeddings: &Tensor,
    labels: &[usize],
    languages: &[String],
    config: ProbeConfig,
) -> Result<ProtocolResult> {
    let centred = subtract_centroid(embeddings);
    protocol(Variant::Centroid, embeddings, &centred, labels, languages, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn clusters(per_class: usize, offset: [f64; 2], seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (c, cx) in [-3.0, 3.0].into_iter().enumerate() {
            for _ in 0..per_class {
                let (nx, ny): (f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
                data.extend([cx + offset[0] + 0.5 * nx, offset[1] + 0.5 * ny]);
                labels.push(c);
            }
        }
        (Tensor::new(vec![2 * per_class, 2], data).unwrap(), labels)
    }

    fn langs() -> Vec<String> {
        vec!["src".into(), "tgt".into()]
    }

    #[test]
    fn identity_enhancement() {
        let (x, y) = clusters(40, [0.0, 0.0], 0);
        let r = run_protocol(&x, &x, &y, &langs(), ProbeConfig::default()).unwrap();
        assert_eq!(r.a2, r.a1);
        assert_eq!(r.a3, r.a1);
        let summary = r.summary();
        for key in ["variant", "a1", "a2", "a3", "n_samples", "languages"] {
            assert!(summary.get(key).is_some(), "{key}");
        }
        assert_eq!(summary["variant"], "ce");
    }

    #[test]
    fn zeroed_enhancement() {
        let (x, y) = clusters(40, [0.0, 0.0], 1);
        let zeros = Tensor::zeros(x.shape());
        let r = run_protocol(&x, &zeros, &y, &langs(), ProbeConfig::default()).unwrap();
        assert!(r.a1 > 0.95);
        // balanced classes: any constant prediction scores one half
        assert_eq!(r.a3, 0.5);
        assert!((0.0..=1.0).contains(&r.a2));
        let total: usize = r.confusion_a2.iter().flatten().sum();
        assert_eq!(total, 16);
    }

    #[test]
    fn misaligned_rows() {
        let (x, y) = clusters(20, [0.0, 0.0], 2);
        let short = Tensor::zeros(&[39, 2]);
        assert!(matches!(
            run_protocol(&x, &short, &y, &langs(), ProbeConfig::default()),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn centred_input_is_unchanged() {
        let (x, y) = clusters(30, [0.0, 0.0], 3);
        let centred = subtract_centroid(&x);
        let r = run_centroid_protocol(&centred, &y, &langs(), ProbeConfig::default()).unwrap();
        assert_eq!(r.variant, Variant::Centroid);
        assert_eq!(r.a2, r.a1);
    }

    #[test]
    fn shared_offset_keeps_separation() {
        // both clusters shifted by the same vector: removing the global mean
        // removes the shift and keeps the ±3 split along the first axis
        let (x, y) = clusters(50, [0.0, 5.0], 4);
        let r = run_centroid_protocol(&x, &y, &langs(), ProbeConfig::default()).unwrap();
        assert!(r.a1 > 0.95);
        assert!((r.a2 - r.a1).abs() <= 0.05, "{} vs {}", r.a2, r.a1);
    }

    #[test]
    fn single_language_rejected() {
        let x = Tensor::zeros(&[20, 2]);
        assert!(run_centroid_protocol(&x, &[0; 20], &langs(), ProbeConfig::default()).is_err());
    }
}
