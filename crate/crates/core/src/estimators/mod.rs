//! Estimators: score an extracted answer against the ground truth.
//!
//! Metrics are addressable by name from manifests and configuration; see
//! [`Metric`]. Every score lies in `[0, 1]`.

mod bleu;
mod rouge;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::{AnswerValue, GroundTruth, LetterSet, QuestionType};
use crate::filters::{normalize_text, ExtractedAnswer};

pub use bleu::{bleu, corpus_bleu, BleuStats, MAX_ORDER};
pub use rouge::{lcs_len, rouge_l, rouge_n, PrfScore};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("at least one reference is required")]
    EmptyReferences,
    #[error("ROUGE-{0} is not supported (n must be 1 or 2)")]
    UnsupportedOrder(usize),
}

/// Lowercase and split on Unicode whitespace. No stemming.
pub fn tokenize(s: &str) -> Vec<String> {
    s.to_lowercase().split_whitespace().map(str::to_string).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "accuracy")]
    Accuracy,
    /// Accuracy of the length-normalized loglikelihood prediction.
    #[serde(rename = "accuracy_norm")]
    AccuracyNorm,
    #[serde(rename = "multi_choice_exact")]
    MultiChoiceExact,
    #[serde(rename = "fill_blank_exact")]
    FillBlankExact,
    #[serde(rename = "bleu")]
    Bleu,
    #[serde(rename = "rouge1")]
    Rouge1,
    #[serde(rename = "rouge2")]
    Rouge2,
    #[serde(rename = "rougeL")]
    RougeL,
}

impl Metric {
    pub const ALL: [Metric; 8] = [
        Metric::Accuracy,
        Metric::AccuracyNorm,
        Metric::MultiChoiceExact,
        Metric::FillBlankExact,
        Metric::Bleu,
        Metric::Rouge1,
        Metric::Rouge2,
        Metric::RougeL,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::AccuracyNorm => "accuracy_norm",
            Metric::MultiChoiceExact => "multi_choice_exact",
            Metric::FillBlankExact => "fill_blank_exact",
            Metric::Bleu => "bleu",
            Metric::Rouge1 => "rouge1",
            Metric::Rouge2 => "rouge2",
            Metric::RougeL => "rougeL",
        }
    }

    /// Whether the metric produces a score for items of this type.
    pub fn applies_to(self, qtype: QuestionType) -> bool {
        match self {
            Metric::Accuracy | Metric::AccuracyNorm => true,
            Metric::MultiChoiceExact => qtype == QuestionType::MultipleChoice,
            Metric::FillBlankExact | Metric::Bleu | Metric::Rouge1 | Metric::Rouge2 | Metric::RougeL => {
                qtype.is_text()
            }
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown metric `{s}`"))
    }
}

/// One item's score under one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionOutcome {
    pub item_id: String,
    pub metric: Metric,
    pub score: f64,
    pub extracted: ExtractedAnswer,
    pub ground_truth: GroundTruth,
    /// Set-overlap diagnostic for multiple-choice items.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jaccard: Option<f64>,
}

/// An aggregated metric value. `name` is a free string because reports
/// carry derived values such as pooled corpus BLEU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub name: String,
    pub value: f64,
    pub support: usize,
}

/// Exact match for single-choice and yes/no answers.
pub fn score_choice_exact(extracted: &ExtractedAnswer, truth: &GroundTruth) -> f64 {
    let hit = match (&extracted.value, truth) {
        (Some(AnswerValue::Letter(a)), GroundTruth::Letter(b)) => a == b,
        (Some(AnswerValue::YesNo(a)), GroundTruth::YesNo(b)) => a == b,
        (Some(value), GroundTruth::Letters(set)) => value.letter_set().as_ref() == Some(set),
        _ => false,
    };
    if hit {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultiChoiceScore {
    pub exact: f64,
    pub jaccard: f64,
}

pub fn score_multi_choice(extracted: &LetterSet, truth: &LetterSet) -> MultiChoiceScore {
    let union = extracted.union(truth).count();
    let intersection = extracted.intersection(truth).count();
    MultiChoiceScore {
        exact: if extracted == truth { 1.0 } else { 0.0 },
        jaccard: if union == 0 { 1.0 } else { intersection as f64 / union as f64 },
    }
}

pub fn score_fill_blank<S: AsRef<str>>(extracted: &str, truths: &[S]) -> f64 {
    let candidate = normalize_text(extracted);
    if truths.iter().any(|t| normalize_text(t.as_ref()) == candidate) {
        1.0
    } else {
        0.0
    }
}

/// Candidates and references share one normalization.
fn text_candidate(extracted: &ExtractedAnswer) -> String {
    normalize_text(extracted.value.as_ref().and_then(AnswerValue::as_text).unwrap_or(""))
}

fn text_truths(truth: &GroundTruth) -> Vec<String> {
    match truth {
        GroundTruth::Text(alternatives) => alternatives.iter().map(|a| normalize_text(a)).collect(),
        GroundTruth::YesNo(v) => vec![v.as_str().to_string()],
        GroundTruth::Letter(l) => vec![l.to_string()],
        GroundTruth::Letters(set) => vec![set.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")],
    }
}

fn best_rouge(candidate: &str, truths: &[String], f: impl Fn(&str, &str) -> f64) -> f64 {
    truths.iter().map(|t| f(candidate, t)).fold(0.0, f64::max)
}

/// Score one metric, or `None` when it does not apply to the question type.
pub fn score_metric(
    metric: Metric,
    qtype: QuestionType,
    extracted: &ExtractedAnswer,
    truth: &GroundTruth,
) -> Option<(f64, Option<f64>)> {
    if !metric.applies_to(qtype) {
        return None;
    }
    let unextracted = extracted.value.is_none();
    let multi = || {
        let truth_set = truth.letter_set().unwrap_or_default();
        let got = extracted.value.as_ref().and_then(AnswerValue::letter_set).unwrap_or_default();
        score_multi_choice(&got, &truth_set)
    };
    let scored = match metric {
        Metric::Accuracy | Metric::AccuracyNorm => match qtype {
            QuestionType::MultipleChoice => (multi().exact, None),
            QuestionType::FillBlank | QuestionType::FreeOpen if !unextracted => {
                (score_fill_blank(&text_candidate(extracted), &text_truths(truth)), None)
            }
            QuestionType::FillBlank | QuestionType::FreeOpen => (0.0, None),
            _ => (score_choice_exact(extracted, truth), None),
        },
        Metric::MultiChoiceExact => {
            let s = multi();
            (s.exact, Some(s.jaccard))
        }
        Metric::FillBlankExact if unextracted => (0.0, None),
        Metric::FillBlankExact => (score_fill_blank(&text_candidate(extracted), &text_truths(truth)), None),
        Metric::Bleu => {
            let truths = text_truths(truth);
            (bleu(&text_candidate(extracted), &truths).unwrap_or(0.0), None)
        }
        Metric::Rouge1 | Metric::Rouge2 => {
            let n = if metric == Metric::Rouge1 { 1 } else { 2 };
            let s = best_rouge(&text_candidate(extracted), &text_truths(truth), |c, r| {
                rouge_n(c, r, n).map(|p| p.f1).unwrap_or(0.0)
            });
            (s, None)
        }
        Metric::RougeL => (best_rouge(&text_candidate(extracted), &text_truths(truth), |c, r| rouge_l(c, r).f1), None),
    };
    Some(scored)
}

/// Score an extracted answer under every applicable metric.
pub fn score_item(
    item_id: &str,
    qtype: QuestionType,
    extracted: &ExtractedAnswer,
    truth: &GroundTruth,
    metrics: &[Metric],
) -> Vec<QuestionOutcome> {
    metrics
        .iter()
        .filter_map(|&metric| {
            let (score, jaccard) = score_metric(metric, qtype, extracted, truth)?;
            Some(QuestionOutcome {
                item_id: item_id.to_string(),
                metric,
                score,
                extracted: extracted.clone(),
                ground_truth: truth.clone(),
                jaccard,
            })
        })
        .collect()
}
