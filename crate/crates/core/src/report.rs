//! Aggregation of run records into reports, and report rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::answer::{AnswerValue, GroundTruth};
use crate::dataset::{DatasetManifest, OVERALL_CATEGORY};
use crate::estimators::{corpus_bleu, Metric, MetricValue};
use crate::runner::RunRecord;

pub const UNCATEGORIZED: &str = "uncategorized";
/// Pooled corpus-level BLEU, reported next to the per-item mean.
pub const CORPUS_BLEU: &str = "bleu_corpus";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub model: String,
    pub metrics: Vec<MetricValue>,
    pub categories: BTreeMap<String, Vec<MetricValue>>,
    pub extraction_failure_rate: f64,
    pub item_count: usize,
    pub error_count: usize,
}

impl MetricReport {
    pub fn metric(&self, name: &str) -> Option<&MetricValue> {
        self.metrics.iter().find(|m| m.name == name)
    }

    pub fn category_metric(&self, category: &str, name: &str) -> Option<&MetricValue> {
        self.categories.get(category)?.iter().find(|m| m.name == name)
    }
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no records to aggregate")]
    EmptyRun,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed report line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Default)]
struct Acc {
    sum: f64,
    support: usize,
}

impl Acc {
    fn add(&mut self, score: f64) {
        self.sum += score;
        self.support += 1;
    }

    fn value(&self, name: &str) -> MetricValue {
        MetricValue {
            name: name.to_string(),
            value: if self.support == 0 { 0.0 } else { self.sum / self.support as f64 },
            support: self.support,
        }
    }
}

/// Metric columns in report order: manifest metrics first, then any extra
/// metric seen in the outcomes (such as `accuracy_norm` in PPL runs).
fn metric_order(records: &[RunRecord], manifest: &DatasetManifest) -> Vec<Metric> {
    let mut order: Vec<Metric> = Vec::new();
    let seen = records.iter().flat_map(|r| r.outcomes.iter().map(|o| o.metric));
    for metric in manifest.metrics.iter().copied().chain(seen) {
        if !order.contains(&metric) {
            order.push(metric);
        }
    }
    order
}

/// Average outcomes per metric, overall and per category. Errored items
/// score 0 on every metric that applies to their question type.
pub fn aggregate(records: &[RunRecord], manifest: &DatasetManifest, model: &str) -> Result<MetricReport, ReportError> {
    if records.is_empty() {
        return Err(ReportError::EmptyRun);
    }
    let order = metric_order(records, manifest);
    let mut overall: BTreeMap<Metric, Acc> = BTreeMap::new();
    let mut by_category: BTreeMap<String, BTreeMap<Metric, Acc>> = BTreeMap::new();
    let mut corpus: Vec<(String, Vec<String>)> = Vec::new();
    let mut error_count = 0;
    let mut unextracted = 0;

    for record in records {
        let category = record.category.clone().unwrap_or_else(|| UNCATEGORIZED.to_string());
        let cat = by_category.entry(category).or_default();
        if record.is_error() {
            error_count += 1;
            for &metric in order.iter().filter(|m| m.applies_to(record.question_type)) {
                overall.entry(metric).or_default().add(0.0);
                cat.entry(metric).or_default().add(0.0);
            }
            continue;
        }
        if record.is_unextracted() {
            unextracted += 1;
        }
        for outcome in &record.outcomes {
            overall.entry(outcome.metric).or_default().add(outcome.score);
            cat.entry(outcome.metric).or_default().add(outcome.score);
            if outcome.metric == Metric::Bleu {
                if let GroundTruth::Text(refs) = &outcome.ground_truth {
                    let candidate = outcome.extracted.value.as_ref().and_then(AnswerValue::as_text).unwrap_or("");
                    corpus.push((candidate.to_string(), refs.clone()));
                }
            }
        }
    }

    let values = |accs: &BTreeMap<Metric, Acc>| -> Vec<MetricValue> {
        order
            .iter()
            .filter_map(|m| accs.get(m).map(|a| a.value(m.name())))
            .collect()
    };
    let mut metrics = values(&overall);
    if !corpus.is_empty() {
        if let Ok(value) = corpus_bleu(&corpus) {
            metrics.push(MetricValue {
                name: CORPUS_BLEU.to_string(),
                value,
                support: corpus.len(),
            });
        }
    }
    let categories = by_category
        .iter()
        .map(|(name, accs)| (name.clone(), values(accs)))
        .collect();
    Ok(MetricReport {
        dataset: manifest.name.clone(),
        model: model.to_string(),
        metrics,
        categories,
        extraction_failure_rate: unextracted as f64 / records.len() as f64,
        item_count: records.len(),
        error_count,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Jsonl,
    Markdown,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(ReportFormat::Jsonl),
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!("unknown report format `{other}` (expected md, csv or jsonl)")),
        }
    }
}

/// Fixed 4-decimal display. Rust's float formatting rounds the exact
/// binary value, so exact ties resolve half-to-even.
pub fn format_value(v: f64) -> String {
    format!("{v:.4}")
}

fn rows(report: &MetricReport) -> impl Iterator<Item = (&str, &MetricValue)> {
    let overall = report.metrics.iter().map(|m| (OVERALL_CATEGORY, m));
    let cats = report
        .categories
        .iter()
        .flat_map(|(c, ms)| ms.iter().map(move |m| (c.as_str(), m)));
    overall.chain(cats)
}

fn render_csv(reports: &[MetricReport]) -> String {
    let mut out = csv::Writer::from_writer(Vec::new());
    out.write_record(["dataset", "model", "metric", "category", "value", "support"])
        .expect("in-memory write");
    for report in reports {
        for (category, m) in rows(report) {
            out.write_record([
                report.dataset.as_str(),
                report.model.as_str(),
                m.name.as_str(),
                category,
                &format_value(m.value),
                &m.support.to_string(),
            ])
            .expect("in-memory write");
        }
    }
    String::from_utf8(out.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

fn md_cell(s: &str) -> String {
    s.replace('|', "\\|")
}

fn render_markdown(reports: &[MetricReport]) -> String {
    let mut out = String::new();
    for (i, report) in reports.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "## {} / {}\n", md_cell(&report.dataset), md_cell(&report.model));
        let _ = writeln!(
            out,
            "items: {}, errors: {}, extraction failure rate: {}\n",
            report.item_count,
            report.error_count,
            format_value(report.extraction_failure_rate)
        );
        let names: Vec<&str> = report.metrics.iter().map(|m| m.name.as_str()).collect();
        let _ = writeln!(out, "| category | {} |", names.iter().map(|n| md_cell(n)).collect::<Vec<_>>().join(" | "));
        let _ = writeln!(out, "|---|{}", "---:|".repeat(names.len()));
        let mut line = |category: &str, values: &[MetricValue]| {
            let cells: Vec<String> = names
                .iter()
                .map(|n| values.iter().find(|m| m.name == *n).map_or("-".to_string(), |m| format_value(m.value)))
                .collect();
            let _ = writeln!(out, "| {} | {} |", md_cell(category), cells.join(" | "));
        };
        line(OVERALL_CATEGORY, &report.metrics);
        for (category, values) in &report.categories {
            line(category, values);
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum JsonlLine {
    Summary {
        dataset: String,
        model: String,
        item_count: usize,
        error_count: usize,
        extraction_failure_rate: f64,
    },
    Metric {
        dataset: String,
        model: String,
        category: String,
        #[serde(flatten)]
        value: MetricValue,
    },
}

fn render_jsonl(reports: &[MetricReport]) -> String {
    let mut out = String::new();
    let mut push = |line: JsonlLine| {
        out.push_str(&serde_json::to_string(&line).expect("plain data"));
        out.push('\n');
    };
    for report in reports {
        push(JsonlLine::Summary {
            dataset: report.dataset.clone(),
            model: report.model.clone(),
            item_count: report.item_count,
            error_count: report.error_count,
            extraction_failure_rate: report.extraction_failure_rate,
        });
        for (category, m) in rows(report) {
            push(JsonlLine::Metric {
                dataset: report.dataset.clone(),
                model: report.model.clone(),
                category: category.to_string(),
                value: m.clone(),
            });
        }
    }
    out
}

/// Rebuild reports from [`ReportFormat::Jsonl`] output.
pub fn parse_jsonl_reports(text: &str) -> Result<Vec<MetricReport>, ReportError> {
    let mut reports: Vec<MetricReport> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let err = |reason: String| ReportError::Parse { line: i + 1, reason };
        let value: Value = serde_json::from_str(raw).map_err(|e| err(e.to_string()))?;
        match serde_json::from_value(value).map_err(|e| err(e.to_string()))? {
            JsonlLine::Summary { dataset, model, item_count, error_count, extraction_failure_rate } => {
                reports.push(MetricReport {
                    dataset,
                    model,
                    metrics: Vec::new(),
                    categories: BTreeMap::new(),
                    extraction_failure_rate,
                    item_count,
                    error_count,
                })
            }
            JsonlLine::Metric { dataset, model, category, value } => {
                let report = reports
                    .last_mut()
                    .filter(|r| r.dataset == dataset && r.model == model)
                    .ok_or_else(|| err("metric line without a matching summary".into()))?;
                if category == OVERALL_CATEGORY {
                    report.metrics.push(value);
                } else {
                    report.categories.entry(category).or_default().push(value);
                }
            }
        }
    }
    Ok(reports)
}

pub fn render(reports: &[MetricReport], format: ReportFormat) -> String {
    match format {
        ReportFormat::Jsonl => render_jsonl(reports),
        ReportFormat::Markdown => render_markdown(reports),
        ReportFormat::Csv => render_csv(reports),
    }
}

pub fn emit_report(reports: &[MetricReport], format: ReportFormat, destination: &Path) -> Result<(), ReportError> {
    if let Some(parent) = destination.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(destination, render(reports, format))?;
    Ok(())
}

/// Names of every metric carried by the reports, in first-seen order.
pub fn metric_names(reports: &[MetricReport]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    reports
        .iter()
        .flat_map(|r| r.metrics.iter())
        .filter(|m| seen.insert(m.name.clone()))
        .map(|m| m.name.clone())
        .collect()
}
