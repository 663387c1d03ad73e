//! Token-level summary metrics: coverage, repetition and n-gram / LCS overlap.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, SEP};

/// Percentage of summary positions whose token occurs anywhere in the input.
pub fn coverage(input: &[TokenId], summary: &[TokenId]) -> f64 {
    if summary.is_empty() {
        return 0.0;
    }
    let vocab: HashSet<TokenId> = input.iter().copied().collect();
    let hits = summary.iter().filter(|t| vocab.contains(t)).count();
    100.0 * hits as f64 / summary.len() as f64
}

/// Percentage of (non-separator) tokens that repeat an earlier token.
pub fn repetition(summary: &[TokenId]) -> f64 {
    let mut seen = HashSet::new();
    let mut counted = 0usize;
    let mut repeats = 0usize;
    for &t in summary.iter().filter(|&&t| t != SEP) {
        counted += 1;
        if !seen.insert(t) {
            repeats += 1;
        }
    }
    if counted == 0 {
        0.0
    } else {
        100.0 * repeats as f64 / counted as f64
    }
}

/// Overlap F-measures on a 0-100 scale.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OverlapScores {
    pub unigram: f64,
    pub bigram: f64,
    pub lcs: f64,
}

impl OverlapScores {
    pub fn mean(&self) -> f64 {
        (self.unigram + self.bigram + self.lcs) / 3.0
    }
}

fn f_measure(matches: usize, candidate_total: usize, reference_total: usize) -> f64 {
    if matches == 0 || candidate_total == 0 || reference_total == 0 {
        return 0.0;
    }
    let p = matches as f64 / candidate_total as f64;
    let r = matches as f64 / reference_total as f64;
    if p + r == 0.0 {
        0.0
    } else {
        100.0 * 2.0 * p * r / (p + r)
    }
}

fn ngram_f(candidate: &[TokenId], reference: &[TokenId], n: usize) -> f64 {
    fn counts(s: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
        let mut m: HashMap<&[TokenId], usize> = HashMap::new();
        for w in s.windows(n) {
            *m.entry(w).or_default() += 1;
        }
        m
    }
    let cand = counts(candidate, n);
    let refc = counts(reference, n);
    let matches: usize = cand
        .iter()
        .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
        .sum();
    f_measure(
        matches,
        candidate.len().saturating_sub(n - 1),
        reference.len().saturating_sub(n - 1),
    )
}

fn lcs_len(a: &[TokenId], b: &[TokenId]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Clipped unigram and bigram F1 plus longest-common-subsequence F1.
pub fn overlap_scores(candidate: &[TokenId], reference: &[TokenId]) -> OverlapScores {
    OverlapScores {
        unigram: ngram_f(candidate, reference, 1),
        bigram: ngram_f(candidate, reference, 2),
        lcs: f_measure(lcs_len(candidate, reference), candidate.len(), reference.len()),
    }
}
