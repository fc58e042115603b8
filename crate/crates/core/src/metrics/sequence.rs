//! Sentence-level alignment metrics over token sequences.

use std::collections::HashMap;
use std::hash::Hash;

/// Length of the longest common subsequence, by the classic O(|a|·|b|)
/// dynamic program with a rolling row.
pub fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            row[j + 1] = if x == y { prev[j] + 1 } else { row[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut row);
    }
    prev[b.len()]
}

/// LCS-based F-measure. `beta` weights recall over precision; 1.0 is the
/// balanced F1.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T], beta: f64) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_length(candidate, reference);
    if lcs == 0 {
        return 0.0;
    }
    let recall = lcs as f64 / reference.len() as f64;
    let precision = lcs as f64 / candidate.len() as f64;
    let beta2 = beta * beta;
    (1.0 + beta2) * precision * recall / (recall + beta2 * precision)
}

/// Contiguous n-grams with multiplicities.
pub fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    assert!(n >= 1, "n-gram order must be positive");
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU with add-one smoothing on higher orders.
///
/// Unigram precision is never smoothed and a zero unigram match gives 0.
/// For `n >= 2` a level with zero clipped matches uses `1 / (total + 1)`.
/// Levels where the candidate has no n-grams are left out of the geometric
/// mean, so short identical sequences still score 1.
pub fn bleu_smoothed<T: Eq + Hash>(candidate: &[T], reference: &[T], max_n: usize) -> f64 {
    assert!(max_n >= 1, "max_n must be positive");
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut levels = 0usize;
    for n in 1..=max_n {
        let cand = ngram_counts(candidate, n);
        let total: usize = cand.values().sum();
        if total == 0 {
            continue;
        }
        let refs = ngram_counts(reference, n);
        let matches: usize = cand
            .iter()
            .map(|(gram, &c)| c.min(refs.get(gram).copied().unwrap_or(0)))
            .sum();
        let precision = if matches > 0 {
            matches as f64 / total as f64
        } else if n == 1 {
            return 0.0;
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_sum += precision.ln();
        levels += 1;
    }
    let brevity = (1.0 - reference.len() as f64 / candidate.len() as f64).exp().min(1.0);
    brevity * (log_sum / levels as f64).exp()
}
