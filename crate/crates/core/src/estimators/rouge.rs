//! ROUGE-N (n = 1, 2) and ROUGE-L with β = 1 F-measure.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{tokenize, MetricError};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PrfScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PrfScore {
    fn from_overlap(overlap: usize, candidate_total: usize, reference_total: usize) -> Self {
        if candidate_total == 0 || reference_total == 0 {
            return PrfScore::default();
        }
        let precision = overlap as f64 / candidate_total as f64;
        let recall = overlap as f64 / reference_total as f64;
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        PrfScore { precision, recall, f1 }
    }
}

fn counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut map = HashMap::new();
    for gram in tokens.windows(n) {
        *map.entry(gram).or_insert(0) += 1;
    }
    map
}

pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> Result<PrfScore, MetricError> {
    if !(1..=2).contains(&n) {
        return Err(MetricError::UnsupportedOrder(n));
    }
    let cand = tokenize(candidate);
    let refr = tokenize(reference);
    // Texts too short to hold an n-gram fall back to token identity.
    if !cand.is_empty() && cand.len() < n && refr.len() < n {
        let f = if cand == refr { 1.0 } else { 0.0 };
        return Ok(PrfScore { precision: f, recall: f, f1: f });
    }
    let cand_counts = counts(&cand, n);
    let ref_counts = counts(&refr, n);
    let overlap = cand_counts
        .iter()
        .map(|(gram, &c)| c.min(ref_counts.get(gram).copied().unwrap_or(0)))
        .sum();
    Ok(PrfScore::from_overlap(
        overlap,
        cand_counts.values().sum(),
        ref_counts.values().sum(),
    ))
}

/// Length of the longest common subsequence, using a single rolling row.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let mut row = vec![0usize; short.len() + 1];
    for x in long {
        let mut diagonal = 0;
        for (j, y) in short.iter().enumerate() {
            let above = row[j + 1];
            row[j + 1] = if x == y { diagonal + 1 } else { above.max(row[j]) };
            diagonal = above;
        }
    }
    row[short.len()]
}

pub fn rouge_l(candidate: &str, reference: &str) -> PrfScore {
    let cand = tokenize(candidate);
    let refr = tokenize(reference);
    PrfScore::from_overlap(lcs_len(&cand, &refr), cand.len(), refr.len())
}
