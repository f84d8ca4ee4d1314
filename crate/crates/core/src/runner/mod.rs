//! Drives items through prompt → inference → extraction → scoring.
//!
//! The runner owns parallelism: at most `concurrency_limit` items are in
//! flight, and records come back in dataset order whatever the completion
//! order. Backend calls go through the response cache and the retry policy;
//! a failing item becomes an errored record and never aborts the run.

mod cache;
mod output;
mod retry;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::{AnswerValue, Letter, QuestionType, YesNo};
use crate::backend::{Backend, Capability, FinishReason, GenerationOptions, LoglikelihoodResult, ModelResponse};
use crate::dataset::{DatasetManifest, EvalItem};
use crate::estimators::{score_item, score_metric, Metric, QuestionOutcome};
use crate::filters::{
    extraction_options, interpret_extractor_reply, model_extraction_bundle, normalize_text, AnswerExtractor,
    ExtractedAnswer, ExtractionStatus,
};
use crate::prompt::{render_prompt, PromptBundle, PromptTemplate};

pub use cache::{cache_key, digest_value, CacheEntry, CacheRequest, CachedResponse, ResponseCache};
pub use output::{read_records, run_dir, write_records, write_run, RunMeta, META_FILE, RECORDS_FILE};
pub use retry::{with_retries, Retried, RetryFailure, RetryPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    #[default]
    Generate,
    Ppl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub mode: EvalMode,
    pub num_shots: usize,
    pub use_cot: bool,
    pub concurrency_limit: usize,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub generation: GenerationOptions,
    /// Fall back to the extractor backend when the rules find nothing.
    pub use_model_extractor: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: EvalMode::Generate,
            num_shots: 0,
            use_cot: false,
            concurrency_limit: 4,
            max_retries: 3,
            backoff_base_ms: 500,
            limit: None,
            cache_dir: None,
            output_dir: PathBuf::from("runs"),
            generation: GenerationOptions::default(),
            use_model_extractor: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), RunError> {
        if self.concurrency_limit == 0 {
            return Err(RunError::Config("concurrency_limit must be at least 1".into()));
        }
        if self.backoff_base_ms == 0 {
            return Err(RunError::Config("backoff_base_ms must be positive".into()));
        }
        self.generation.validate().map_err(RunError::Config)
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            backoff_base: Duration::from_millis(self.backoff_base_ms),
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("run configuration error: {0}")]
    Config(String),
    #[error("backend `{model}` does not support {capability}")]
    Unsupported { model: String, capability: Capability },
    #[error("cache error: {0}")]
    Cache(#[from] std::io::Error),
}

/// Per-choice loglikelihood in PPL mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceLogprob {
    pub letter: Letter,
    pub total_logprob: f64,
    pub token_count: u32,
    pub continuation_chars: u32,
    /// `total_logprob / continuation_chars`.
    pub normalized_logprob: f64,
}

/// Everything recorded for one item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub item_id: String,
    pub question_type: QuestionType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub prompt_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choice_logprobs: Option<Vec<ChoiceLogprob>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extracted: Option<ExtractedAnswer>,
    #[serde(default)]
    pub outcomes: Vec<QuestionOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Non-fatal observations such as a failed model extraction.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl RunRecord {
    fn new(item: &EvalItem, prompt_digest: String) -> Self {
        RunRecord {
            item_id: item.id.clone(),
            question_type: item.question_type,
            category: item.category.clone(),
            prompt_digest,
            response: None,
            choice_logprobs: None,
            extracted: None,
            outcomes: Vec::new(),
            error: None,
            notes: Vec::new(),
        }
    }

    fn failed(mut self, error: impl std::fmt::Display) -> Self {
        self.error = Some(error.to_string());
        self.outcomes.clear();
        self
    }

    pub fn is_error(&self) -> bool {
        self.error.is_some()
    }

    pub fn is_unextracted(&self) -> bool {
        !self.is_error() && self.extracted.as_ref().is_none_or(ExtractedAnswer::is_unextracted)
    }
}

pub fn prompt_digest(bundle: &PromptBundle) -> String {
    digest_value(&serde_json::to_value(bundle).expect("plain data"))
}

/// Extract and score a generated response.
pub fn score_generation(
    item: &EvalItem,
    response: &str,
    filters: &AnswerExtractor,
    metrics: &[Metric],
) -> (ExtractedAnswer, Vec<QuestionOutcome>) {
    let extracted = filters.extract(response, item.question_type, item.choices.as_deref());
    let outcomes = score_item(&item.id, item.question_type, &extracted, &item.answer, metrics);
    (extracted, outcomes)
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax_lowest_index(values: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

fn predicted_value(item: &EvalItem, letter: Letter) -> AnswerValue {
    let choice_text = item
        .choices
        .as_ref()
        .and_then(|c| c.get(letter.index()))
        .map(|c| normalize_text(c))
        .unwrap_or_default();
    match item.question_type {
        QuestionType::SingleChoice => AnswerValue::Letter(letter),
        QuestionType::MultipleChoice => AnswerValue::Letters(std::iter::once(letter).collect()),
        QuestionType::YesNo => YesNo::from_token(&choice_text).map_or(AnswerValue::Letter(letter), AnswerValue::YesNo),
        QuestionType::FillBlank | QuestionType::FreeOpen => AnswerValue::Text(choice_text),
    }
}

/// Pick answers from per-choice loglikelihoods: raw argmax for the
/// manifest metrics, per-character argmax for `accuracy_norm`.
pub fn score_ppl(item: &EvalItem, choices: &[ChoiceLogprob], metrics: &[Metric]) -> (ExtractedAnswer, Vec<QuestionOutcome>) {
    let pick = |values: Vec<f64>, rule: &str| {
        argmax_lowest_index(values)
            .map(|i| choices[i].letter)
            .map(|letter| ExtractedAnswer::extracted(predicted_value(item, letter), rule, Some(&letter.to_string())))
            .unwrap_or_else(ExtractedAnswer::unextracted)
    };
    let raw = pick(choices.iter().map(|c| c.total_logprob).collect(), "loglikelihood");
    let norm = pick(choices.iter().map(|c| c.normalized_logprob).collect(), "loglikelihood_norm");
    let primary: Vec<Metric> = metrics.iter().copied().filter(|m| *m != Metric::AccuracyNorm).collect();
    let mut outcomes = score_item(&item.id, item.question_type, &raw, &item.answer, &primary);
    if let Some((score, _)) = score_metric(Metric::Accuracy, item.question_type, &norm, &item.answer) {
        outcomes.push(QuestionOutcome {
            item_id: item.id.clone(),
            metric: Metric::AccuracyNorm,
            score,
            extracted: norm,
            ground_truth: item.answer.clone(),
            jaccard: None,
        });
    }
    (raw, outcomes)
}

/// Re-run extraction and scoring on a stored record without touching a
/// backend. Errored records and records without a response pass through.
pub fn rescore_record(record: &RunRecord, item: &EvalItem, filters: &AnswerExtractor, metrics: &[Metric]) -> RunRecord {
    let mut out = record.clone();
    if record.is_error() {
        return out;
    }
    let rescored = match (&record.choice_logprobs, &record.response) {
        (Some(choices), _) => Some(score_ppl(item, choices, metrics)),
        (None, Some(response)) => {
            let (extracted, outcomes) = score_generation(item, response, filters, metrics);
            match &record.extracted {
                // Keep an earlier model extraction the rules still cannot reproduce.
                Some(prior) if extracted.is_unextracted() && prior.status == ExtractionStatus::ModelExtracted => {
                    Some((prior.clone(), score_item(&item.id, item.question_type, prior, &item.answer, metrics)))
                }
                _ => Some((extracted, outcomes)),
            }
        }
        (None, None) => None,
    };
    if let Some((extracted, outcomes)) = rescored {
        out.extracted = Some(extracted);
        out.outcomes = outcomes;
    }
    out
}

/// Continuation scored for a choice in PPL mode: a single leading space.
pub fn choice_continuation(choice: &str) -> String {
    format!(" {choice}")
}

/// The assembled evaluator: backend, evaluation facilities and run settings.
pub struct Evaluator {
    backend: Arc<dyn Backend>,
    extractor: Option<Arc<dyn Backend>>,
    filters: AnswerExtractor,
    template: PromptTemplate,
    config: RunConfig,
    cache: Option<Arc<ResponseCache>>,
}

impl Evaluator {
    /// Opens the cache when `config.cache_dir` is set.
    pub fn new(backend: Arc<dyn Backend>, config: RunConfig) -> Result<Self, RunError> {
        config.validate()?;
        let cache = match &config.cache_dir {
            Some(dir) => Some(Arc::new(ResponseCache::open(dir)?)),
            None => None,
        };
        Ok(Evaluator {
            backend,
            extractor: None,
            filters: AnswerExtractor::default(),
            template: PromptTemplate::default(),
            config,
            cache,
        })
    }

    pub fn with_template(mut self, template: PromptTemplate) -> Result<Self, RunError> {
        template.validate().map_err(|e| RunError::Config(e.to_string()))?;
        self.template = template;
        Ok(self)
    }

    pub fn with_filters(mut self, filters: AnswerExtractor) -> Self {
        self.filters = filters;
        self
    }

    pub fn with_extractor(mut self, extractor: Arc<dyn Backend>) -> Result<Self, RunError> {
        if !extractor.capabilities().supports_generation {
            return Err(RunError::Unsupported {
                model: extractor.capabilities().model_name.clone(),
                capability: Capability::Generation,
            });
        }
        self.extractor = Some(extractor);
        Ok(self)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.backend
    }

    pub async fn run(&self, items: &[EvalItem], manifest: &DatasetManifest) -> Result<Vec<RunRecord>, RunError> {
        match self.config.mode {
            EvalMode::Generate => self.run_generation_eval(items, manifest).await,
            EvalMode::Ppl => self.run_ppl_eval(items, manifest).await,
        }
    }

    fn selected<'a>(&self, items: &'a [EvalItem]) -> &'a [EvalItem] {
        &items[..self.config.limit.unwrap_or(items.len()).min(items.len())]
    }

    fn require(&self, capability: Capability, supported: bool) -> Result<(), RunError> {
        if supported {
            Ok(())
        } else {
            Err(RunError::Unsupported {
                model: self.backend.capabilities().model_name.clone(),
                capability,
            })
        }
    }

    pub async fn run_generation_eval(
        &self,
        items: &[EvalItem],
        manifest: &DatasetManifest,
    ) -> Result<Vec<RunRecord>, RunError> {
        self.require(Capability::Generation, self.backend.capabilities().supports_generation)?;
        Ok(stream::iter(self.selected(items))
            .map(|item| self.generate_item(item, manifest))
            .buffered(self.config.concurrency_limit)
            .collect()
            .await)
    }

    pub async fn run_ppl_eval(&self, items: &[EvalItem], manifest: &DatasetManifest) -> Result<Vec<RunRecord>, RunError> {
        self.require(Capability::Loglikelihood, self.backend.capabilities().supports_loglikelihood)?;
        let selected = self.selected(items);
        if let Some(item) = selected.iter().find(|i| i.choices.is_none()) {
            return Err(RunError::Config(format!("ppl mode needs choices, but item `{}` has none", item.id)));
        }
        Ok(stream::iter(selected)
            .map(|item| self.ppl_item(item, manifest))
            .buffered(self.config.concurrency_limit)
            .collect()
            .await)
    }

    async fn cached_generate(
        &self,
        backend: &dyn Backend,
        bundle: &PromptBundle,
        options: &GenerationOptions,
    ) -> Result<ModelResponse, RetryFailure> {
        let key = cache_key(&backend.capabilities().model_name, &CacheRequest::Generate { bundle, options });
        if let Some(CachedResponse::Generation(hit)) = self.cache.as_ref().and_then(|c| c.get(&key)) {
            return Ok(hit);
        }
        let Retried { value, retries } =
            with_retries(self.config.retry_policy(), || backend.generate(bundle, options)).await?;
        if retries > 0 {
            tracing::info!(item = bundle.item_id.as_deref().unwrap_or("-"), retries, "request succeeded after retries");
        }
        self.store(&key, CachedResponse::Generation(value.clone()));
        Ok(value)
    }

    async fn cached_loglikelihood(&self, context: &str, continuation: &str) -> Result<LoglikelihoodResult, RetryFailure> {
        let backend = self.backend.as_ref();
        let key = cache_key(
            &backend.capabilities().model_name,
            &CacheRequest::Loglikelihood { context, continuation },
        );
        if let Some(CachedResponse::Loglikelihood(hit)) = self.cache.as_ref().and_then(|c| c.get(&key)) {
            return Ok(hit);
        }
        let Retried { value, .. } =
            with_retries(self.config.retry_policy(), || backend.loglikelihood(context, continuation)).await?;
        self.store(&key, CachedResponse::Loglikelihood(value));
        Ok(value)
    }

    fn store(&self, key: &str, response: CachedResponse) {
        if let Some(cache) = &self.cache {
            if let Err(e) = cache.put(key, response) {
                tracing::warn!(error = %e, "failed to write cache entry");
            }
        }
    }

    fn new_record(&self, item: &EvalItem, bundle: &PromptBundle) -> RunRecord {
        let mut record = RunRecord::new(item, prompt_digest(bundle));
        let available = item.few_shot.as_ref().map_or(0, Vec::len);
        if self.config.num_shots > available {
            record
                .notes
                .push(format!("requested {} shots, {available} available", self.config.num_shots));
        }
        record
    }

    async fn generate_item(&self, item: &EvalItem, manifest: &DatasetManifest) -> RunRecord {
        let bundle = match render_prompt(item, &self.template, self.config.use_cot, self.config.num_shots) {
            Ok(b) => b,
            Err(e) => return RunRecord::new(item, String::new()).failed(e),
        };
        let mut record = self.new_record(item, &bundle);
        let response = match self.cached_generate(self.backend.as_ref(), &bundle, &self.config.generation).await {
            Ok(r) => r,
            Err(e) => return record.failed(e),
        };
        record.response = Some(response.text.clone());
        if response.finish_reason == FinishReason::Error {
            return record.failed("backend reported finish_reason=error");
        }
        let (mut extracted, mut outcomes) = score_generation(item, &response.text, &self.filters, &manifest.metrics);
        if extracted.is_unextracted() && self.config.use_model_extractor {
            if let Some(extractor) = &self.extractor {
                match self.model_extract(extractor.as_ref(), item, &response.text).await {
                    Ok(answer) => {
                        if answer.status == ExtractionStatus::ModelExtracted {
                            outcomes = score_item(&item.id, item.question_type, &answer, &item.answer, &manifest.metrics);
                            extracted = answer;
                        }
                    }
                    Err(e) => record.notes.push(format!("model extraction failed: {e}")),
                }
            }
        }
        record.extracted = Some(extracted);
        record.outcomes = outcomes;
        record
    }

    async fn model_extract(&self, extractor: &dyn Backend, item: &EvalItem, raw: &str) -> Result<ExtractedAnswer, RetryFailure> {
        let bundle = model_extraction_bundle(raw, item.question_type, item.choices.as_deref(), Some(&item.id));
        let reply = self.cached_generate(extractor, &bundle, &extraction_options()).await?;
        Ok(interpret_extractor_reply(&reply.text, item.question_type, item.choices.as_deref(), &self.filters))
    }

    async fn ppl_item(&self, item: &EvalItem, manifest: &DatasetManifest) -> RunRecord {
        let bundle = match render_prompt(item, &self.template, self.config.use_cot, self.config.num_shots) {
            Ok(b) => b,
            Err(e) => return RunRecord::new(item, String::new()).failed(e),
        };
        let mut record = self.new_record(item, &bundle);
        let context = bundle.flatten(&self.template.exemplar_separator);
        let mut scores = Vec::new();
        for (i, choice) in item.choices.as_deref().unwrap_or_default().iter().enumerate() {
            let letter = Letter::from_index(i).expect("validated choice count");
            match self.cached_loglikelihood(&context, &choice_continuation(choice)).await {
                Ok(ll) => scores.push(ChoiceLogprob {
                    letter,
                    total_logprob: ll.total_logprob,
                    token_count: ll.token_count,
                    continuation_chars: ll.continuation_chars,
                    normalized_logprob: ll.per_char(),
                }),
                Err(e) => return record.failed(format!("choice {letter}: {e}")),
            }
        }
        let (extracted, outcomes) = score_ppl(item, &scores, &manifest.metrics);
        record.choice_logprobs = Some(scores);
        record.extracted = Some(extracted);
        record.outcomes = outcomes;
        record
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_lowest_index([-4.0, -2.0, -9.0]), Some(1));
        assert_eq!(argmax_lowest_index([-2.0, -2.0]), Some(0));
        assert_eq!(argmax_lowest_index(std::iter::empty()), None);
    }

    #[test]
    fn config_validation() {
        let mut c = RunConfig::default();
        assert!(c.validate().is_ok());
        c.concurrency_limit = 0;
        assert!(c.validate().is_err());
    }
}
