//! Corpus-level BLEU-4: clipped n-gram precision, geometric mean with uniform
//! weights, and a brevity penalty, reported on the 0-100 scale.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor applied to each precision inside the log so that tiny corpora score
/// near zero instead of erroring on a zero n-gram count.
const SMOOTH_FLOOR: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("candidate corpus is empty")]
    EmptyCorpus,
    #[error("candidate/reference pair count mismatch: {candidates} vs {references}")]
    PairCountMismatch { candidates: usize, references: usize },
    #[error("n-gram order {0} outside supported range 1..=4")]
    InvalidOrder(usize),
}

/// Score breakdown for one candidate/reference corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BleuReport {
    /// Combined score in [0, 100].
    pub bleu4: f64,
    /// Clipped n-gram precisions p1..p4, unsmoothed.
    pub precisions: [f64; 4],
    /// Brevity penalty in (0, 1].
    pub brevity_penalty: f64,
    pub candidate_len: usize,
    pub reference_len: usize,
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            let gram: Vec<&str> = window.iter().map(|t| t.as_ref()).collect();
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

fn check_pairs<S: AsRef<str>>(
    candidates: &[Vec<S>],
    references: &[Vec<S>],
) -> Result<(), MetricsError> {
    if candidates.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    if candidates.len() != references.len() {
        return Err(MetricsError::PairCountMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    Ok(())
}

/// Corpus-level clipped n-gram precision: matched counts are clipped per pair
/// at the reference count and summed over the corpus, divided by the total
/// number of candidate n-grams. A corpus with no candidate n-grams of order
/// `n` has precision 0.
pub fn modified_precision<S: AsRef<str>>(
    candidates: &[Vec<S>],
    references: &[Vec<S>],
    n: usize,
) -> Result<f64, MetricsError> {
    if !(1..=4).contains(&n) {
        return Err(MetricsError::InvalidOrder(n));
    }
    check_pairs(candidates, references)?;
    let mut matched = 0usize;
    let mut total = 0usize;
    for (cand, reference) in candidates.iter().zip(references) {
        let cand_counts = ngram_counts(cand, n);
        let ref_counts = ngram_counts(reference, n);
        for (gram, count) in &cand_counts {
            let allowed = ref_counts.get(gram).copied().unwrap_or(0);
            matched += count.min(&allowed);
            total += count;
        }
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(matched as f64 / total as f64)
}

/// BLEU-4 over a paired corpus: 100 * b * exp(sum_n 1/4 * ln p_n) with
/// b = 1 when the candidate corpus is longer than the reference corpus and
/// exp(1 - ref_len/cand_len) otherwise.
pub fn corpus_bleu4<S: AsRef<str>>(
    candidates: &[Vec<S>],
    references: &[Vec<S>],
) -> Result<BleuReport, MetricsError> {
    check_pairs(candidates, references)?;
    let mut precisions = [0.0f64; 4];
    for (i, slot) in precisions.iter_mut().enumerate() {
        *slot = modified_precision(candidates, references, i + 1)?;
    }
    let candidate_len: usize = candidates.iter().map(Vec::len).sum();
    let reference_len: usize = references.iter().map(Vec::len).sum();
    if candidate_len == 0 {
        return Ok(BleuReport {
            bleu4: 0.0,
            precisions,
            brevity_penalty: 0.0,
            candidate_len,
            reference_len,
        });
    }
    let brevity_penalty = if candidate_len > reference_len {
        1.0
    } else {
        (1.0 - reference_len as f64 / candidate_len as f64).exp()
    };
    let log_mean: f64 = precisions
        .iter()
        .map(|p| 0.25 * p.max(SMOOTH_FLOOR).ln())
        .sum();
    Ok(BleuReport {
        bleu4: 100.0 * brevity_penalty * log_mean.exp(),
        precisions,
        brevity_penalty,
        candidate_len,
        reference_len,
    })
}
