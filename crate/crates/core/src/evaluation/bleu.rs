use std::collections::HashMap;

use crate::error::{Error, Result};

/// Corpus statistics behind a BLEU score.
#[derive(Debug, Clone, PartialEq)]
pub struct BleuStats {
    /// Clipped n-gram matches for n = 1..=max_n.
    pub matches: Vec<usize>,
    /// Candidate n-gram counts for n = 1..=max_n.
    pub totals: Vec<usize>,
    pub hyp_len: usize,
    pub ref_len: usize,
    /// Precisions after smoothing; `None` where the hypotheses have no n-grams
    /// of that order.
    pub precisions: Vec<Option<f64>>,
    pub brevity_penalty: f64,
    /// In `[0, 100]`.
    pub score: f64,
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus-level BLEU with clipped n-gram precisions up to `max_n` and a
/// brevity penalty. A zero precision is replaced by `1 / (2 · candidates)`;
/// orders for which the hypotheses contain no n-grams at all are left out of
/// the geometric mean.
pub fn bleu_stats<S: AsRef<str>, T: AsRef<str>>(
    hypotheses: &[Vec<S>],
    references: &[Vec<T>],
    max_n: usize,
) -> Result<BleuStats> {
    if hypotheses.is_empty() {
        return Err(Error::Protocol("empty corpus".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Protocol(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::Config("max_n must be positive".into()));
    }
    let mut matches = vec![0; max_n];
    let mut totals = vec![0; max_n];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let hc = ngrams(h, n);
            let rc = ngrams(r, n);
            for (g, &c) in &hc {
                totals[n - 1] += c;
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
        }
    }
    let precisions: Vec<Option<f64>> = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| match (m, t) {
            (_, 0) => None,
            (0, t) => Some(1.0 / (2.0 * t as f64)),
            (m, t) => Some(m as f64 / t as f64),
        })
        .collect();
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let logs: Vec<f64> = precisions.iter().flatten().map(|p| p.ln()).collect();
    let score = if logs.is_empty() {
        0.0
    } else {
        100.0 * brevity_penalty * (logs.iter().sum::<f64>() / logs.len() as f64).exp()
    };
    Ok(BleuStats {
        matches,
        totals,
        hyp_len,
        ref_len,
        precisions,
        brevity_penalty,
        score,
    })
}

/// Corpus-level BLEU in `[0, 100]`; see [`bleu_stats`].
pub fn bleu<S: AsRef<str>, T: AsRef<str>>(hypotheses: &[Vec<S>], references: &[Vec<T>], max_n: usize) -> Result<f64> {
    Ok(bleu_stats(hypotheses, references, max_n)?.score)
}
