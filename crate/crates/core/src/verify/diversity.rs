//! Generation diversity: Self-BLEU-4, pooled Distinct-n and unigram entropy.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::{TokenId, TokenSequence};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityMetrics {
    pub self_bleu: f64,
    pub distinct2: f64,
    pub distinct4: f64,
    /// Shannon entropy in nats of the pooled unigram distribution.
    pub entropy: f64,
}

fn ngram_counts(seq: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for g in seq.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU-4 with uniform weights, multi-reference clipping, the
/// closest-reference brevity penalty and no smoothing.
pub fn bleu4(hypothesis: &[TokenId], references: &[&[TokenId]]) -> f64 {
    if hypothesis.is_empty() || references.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let hyp = ngram_counts(hypothesis, n);
        let total: usize = hyp.values().sum();
        if total == 0 {
            return 0.0;
        }
        let ref_counts: Vec<_> = references.iter().map(|r| ngram_counts(r, n)).collect();
        let clipped: usize = hyp
            .iter()
            .map(|(g, &c)| {
                let max_ref = ref_counts.iter().map(|m| m.get(g).copied().unwrap_or(0)).max().unwrap_or(0);
                c.min(max_ref)
            })
            .sum();
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let c = hypothesis.len();
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(c);
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * (log_sum / 4.0).exp()
}

/// Unique n-grams over total n-grams, pooled over all samples.
pub fn distinct_n(samples: &[TokenSequence], n: usize) -> f64 {
    let mut unique = HashMap::new();
    let mut total = 0usize;
    for s in samples {
        for (g, c) in ngram_counts(s, n) {
            total += c;
            unique.insert(g, ());
        }
    }
    if total == 0 {
        0.0
    } else {
        unique.len() as f64 / total as f64
    }
}

pub fn unigram_entropy(samples: &[TokenSequence]) -> f64 {
    let mut counts: HashMap<TokenId, usize> = HashMap::new();
    let mut total = 0usize;
    for s in samples {
        for &t in s.iter() {
            *counts.entry(t).or_insert(0) += 1;
            total += 1;
        }
    }
    if total == 0 {
        return 0.0;
    }
    let mut keys: Vec<_> = counts.into_iter().collect();
    keys.sort_unstable();
    keys.iter()
        .map(|&(_, c)| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

pub fn diversity_metrics(samples: &[TokenSequence]) -> Result<DiversityMetrics> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples {
            got: samples.len(),
            min: 2,
        });
    }
    let mut bleu = 0.0;
    for (i, h) in samples.iter().enumerate() {
        let refs: Vec<&[TokenId]> = samples
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, s)| s.tokens())
            .collect();
        bleu += bleu4(h, &refs);
    }
    Ok(DiversityMetrics {
        self_bleu: bleu / samples.len() as f64,
        distinct2: distinct_n(samples, 2),
        distinct4: distinct_n(samples, 4),
        entropy: unigram_entropy(samples),
    })
}
