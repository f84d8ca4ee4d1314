//! Sentence- and corpus-level BLEU (max order 4).
//!
//! Unigram precision is unsmoothed; higher orders use add-one smoothing.
//! Orders for which the candidate has no n-grams are left out of the
//! geometric mean.

use std::collections::HashMap;

use super::{tokenize, MetricError};

pub const MAX_ORDER: usize = 4;

/// Clipped n-gram counts and lengths; sums across sentences give corpus BLEU.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matched: [usize; MAX_ORDER],
    pub total: [usize; MAX_ORDER],
    pub candidate_len: usize,
    pub reference_len: usize,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Closest reference length; ties go to the shorter reference.
fn closest_reference_len(candidate_len: usize, references: &[Vec<String>]) -> usize {
    references
        .iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(candidate_len), r))
        .unwrap_or(0)
}

impl BleuStats {
    pub fn sentence(candidate: &[String], references: &[Vec<String>]) -> Self {
        let mut stats = BleuStats {
            candidate_len: candidate.len(),
            reference_len: closest_reference_len(candidate.len(), references),
            ..BleuStats::default()
        };
        for n in 1..=MAX_ORDER {
            let cand = ngram_counts(candidate, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for reference in references {
                for (gram, count) in ngram_counts(reference, n) {
                    let slot = max_ref.entry(gram).or_insert(0);
                    *slot = (*slot).max(count);
                }
            }
            stats.total[n - 1] = cand.values().sum();
            stats.matched[n - 1] = cand
                .iter()
                .map(|(gram, &count)| count.min(max_ref.get(gram).copied().unwrap_or(0)))
                .sum();
        }
        stats
    }

    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..MAX_ORDER {
            self.matched[n] += other.matched[n];
            self.total[n] += other.total[n];
        }
        self.candidate_len += other.candidate_len;
        self.reference_len += other.reference_len;
    }

    pub fn score(&self) -> f64 {
        if self.candidate_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        let mut orders = 0usize;
        for n in 0..MAX_ORDER {
            let total = self.total[n];
            if total == 0 {
                continue;
            }
            let precision = if n == 0 {
                self.matched[n] as f64 / total as f64
            } else {
                (self.matched[n] + 1) as f64 / (total + 1) as f64
            };
            if precision == 0.0 {
                return 0.0;
            }
            log_sum += precision.ln();
            orders += 1;
        }
        let geometric_mean = (log_sum / orders as f64).exp();
        let (c, r) = (self.candidate_len as f64, self.reference_len as f64);
        let brevity_penalty = if c < r { (1.0 - r / c).exp() } else { 1.0 };
        (geometric_mean * brevity_penalty).clamp(0.0, 1.0)
    }
}

/// Sentence BLEU of `candidate` against one or more references.
pub fn bleu<S: AsRef<str>>(candidate: &str, references: &[S]) -> Result<f64, MetricError> {
    if references.is_empty() {
        return Err(MetricError::EmptyReferences);
    }
    let cand = tokenize(candidate);
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r.as_ref())).collect();
    Ok(BleuStats::sentence(&cand, &refs).score())
}

/// Micro-averaged BLEU over pooled n-gram counts.
pub fn corpus_bleu<S: AsRef<str>>(pairs: &[(String, Vec<S>)]) -> Result<f64, MetricError> {
    let mut pooled = BleuStats::default();
    for (candidate, references) in pairs {
        if references.is_empty() {
            return Err(MetricError::EmptyReferences);
        }
        let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r.as_ref())).collect();
        pooled.add(&BleuStats::sentence(&tokenize(candidate), &refs));
    }
    Ok(pooled.score())
}
