//! BLEU-n scoring: modified n-gram precision, exponentially smoothed sentence
//! scores, and unsmoothed corpus-level scores.
//!
//! Sentence scores double as the caption-to-caption similarity kernel of the
//! consensus captioner, so the smoothed path is also exposed over precomputed
//! n-gram statistics for repeated pairwise scoring.

use std::collections::HashMap;

use serde::Serialize;

use crate::error::{Error, Result};

/// Multiset of the n-grams of one token sequence, for a single order.
#[derive(Debug, Clone, Default)]
pub struct NGramCounts {
    order: usize,
    counts: HashMap<Vec<String>, u64>,
}

impl NGramCounts {
    pub fn from_tokens(tokens: &[String], order: usize) -> Self {
        assert!(order >= 1, "n-gram order must be >= 1");
        let mut counts = HashMap::new();
        if tokens.len() >= order {
            for gram in tokens.windows(order) {
                *counts.entry(gram.to_vec()).or_insert(0) += 1;
            }
        }
        NGramCounts { order, counts }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn count(&self, gram: &[String]) -> u64 {
        self.counts.get(gram).copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Vec<String>, u64)> {
        self.counts.iter().map(|(g, &c)| (g, c))
    }
}

/// A BLEU score with its constituents.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BleuScore {
    pub value: f64,
    /// Modified precisions p_1..p_N (post-smoothing for sentence scores).
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
}

/// Clipped n-gram matches and total hypothesis n-grams for one order.
///
/// Matches are clipped per n-gram to the maximum count in any single
/// reference; the total is `max(0, len(hyp) - n + 1)`.
pub fn modified_precision(
    hypothesis: &[String],
    references: &[Vec<String>],
    order: usize,
) -> (u64, u64) {
    assert!(order >= 1, "n-gram order must be >= 1");
    if hypothesis.len() < order {
        return (0, 0);
    }
    let total = (hypothesis.len() - order + 1) as u64;
    let hyp_counts = NGramCounts::from_tokens(hypothesis, order);
    let ref_counts: Vec<NGramCounts> = references
        .iter()
        .map(|r| NGramCounts::from_tokens(r, order))
        .collect();
    let clipped = clipped_matches(&hyp_counts, &ref_counts);
    (clipped, total)
}

fn clipped_matches(hyp: &NGramCounts, refs: &[NGramCounts]) -> u64 {
    hyp.iter()
        .map(|(gram, count)| {
            let best_ref = refs.iter().map(|r| r.count(gram)).max().unwrap_or(0);
            count.min(best_ref)
        })
        .sum()
}

/// The reference length closest to the hypothesis length, ties to the
/// shorter reference.
fn closest_reference_length(hyp_len: usize, references: &[Vec<String>]) -> usize {
    references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(hyp_len), len))
        .expect("references non-empty")
}

fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}

/// Geometric mean of the per-order precisions times the brevity penalty.
/// Zero precisions collapse the value to zero (the unsmoothed convention).
fn assemble(per_order: &[(u64, u64)], hyp_len: usize, ref_len: usize, smoothed: bool) -> BleuScore {
    let n = per_order.len();
    if hyp_len == 0 {
        return BleuScore {
            value: 0.0,
            precisions: vec![0.0; n],
            brevity_penalty: 1.0,
        };
    }
    let mut precisions = Vec::with_capacity(n);
    let mut zero_orders = 0i32;
    for &(matches, total) in per_order {
        let p = if smoothed {
            // Zero-match orders get a numerator of 1/2^k, where k counts the
            // zero-match orders seen so far.
            let denom = total.max(1) as f64;
            if matches > 0 {
                matches as f64 / denom
            } else {
                zero_orders += 1;
                0.5f64.powi(zero_orders) / denom
            }
        } else if total > 0 {
            matches as f64 / total as f64
        } else {
            0.0
        };
        precisions.push(p);
    }
    let bp = brevity_penalty(hyp_len, ref_len);
    let value = if precisions.iter().all(|&p| p > 0.0) {
        bp * (precisions.iter().map(|p| p.ln()).sum::<f64>() / n as f64).exp()
    } else {
        0.0
    };
    BleuScore {
        value,
        precisions,
        brevity_penalty: bp,
    }
}

/// Smoothed sentence BLEU up to `max_order`. An empty hypothesis scores 0.
pub fn sentence_bleu(
    hypothesis: &[String],
    references: &[Vec<String>],
    max_order: usize,
) -> Result<BleuScore> {
    if references.is_empty() {
        return Err(Error::EmptyReferences);
    }
    let n = max_order.max(1);
    if hypothesis.is_empty() {
        return Ok(assemble(&vec![(0, 0); n], 0, 0, true));
    }
    let per_order: Vec<(u64, u64)> = (1..=n)
        .map(|order| modified_precision(hypothesis, references, order))
        .collect();
    let ref_len = closest_reference_length(hypothesis.len(), references);
    Ok(assemble(&per_order, hypothesis.len(), ref_len, true))
}

/// Corpus BLEU: clipped matches and totals are summed over all pairs per
/// order before the geometric mean, with a corpus-level brevity penalty and
/// no smoothing.
pub fn corpus_bleu(pairs: &[(Vec<String>, Vec<Vec<String>>)], max_order: usize) -> Result<BleuScore> {
    if pairs.is_empty() {
        return Err(Error::EmptyPairs);
    }
    let n = max_order.max(1);
    let mut matches = vec![0u64; n];
    let mut totals = vec![0u64; n];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hypothesis, references) in pairs {
        if references.is_empty() {
            return Err(Error::EmptyReferences);
        }
        for order in 1..=n {
            let (m, t) = modified_precision(hypothesis, references, order);
            matches[order - 1] += m;
            totals[order - 1] += t;
        }
        hyp_len += hypothesis.len();
        ref_len += closest_reference_length(hypothesis.len(), references);
    }
    let per_order: Vec<(u64, u64)> = matches.into_iter().zip(totals).collect();
    Ok(assemble(&per_order, hyp_len, ref_len, false))
}

/// Precomputed n-gram statistics of one sentence, orders 1..=max_order.
#[derive(Debug, Clone)]
pub struct SentenceStats {
    len: usize,
    grams: Vec<NGramCounts>,
}

impl SentenceStats {
    pub fn new(tokens: &[String], max_order: usize) -> Self {
        let n = max_order.max(1);
        SentenceStats {
            len: tokens.len(),
            grams: (1..=n).map(|o| NGramCounts::from_tokens(tokens, o)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Smoothed sentence BLEU of `hypothesis` against a single precomputed
/// reference. Identical to `sentence_bleu` with one reference.
pub fn sentence_bleu_precomputed(hypothesis: &SentenceStats, reference: &SentenceStats) -> f64 {
    debug_assert_eq!(hypothesis.grams.len(), reference.grams.len());
    if hypothesis.len == 0 {
        return 0.0;
    }
    let per_order: Vec<(u64, u64)> = hypothesis
        .grams
        .iter()
        .zip(&reference.grams)
        .map(|(h, r)| {
            let total = (hypothesis.len + 1).saturating_sub(h.order()) as u64;
            (clipped_matches(h, std::slice::from_ref(r)), total)
        })
        .collect();
    assemble(&per_order, hypothesis.len, reference.len, true).value
}
