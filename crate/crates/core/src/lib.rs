//! Model-agnostic evaluation pipeline for large language models.
//!
//! Items flow through a fixed sequence of stages: a dataset in the unified
//! JSON layout is loaded ([`dataset`]), each item is rendered into a
//! conversation ([`prompt`]), sent to an inference backend ([`backend`]),
//! the key answer is pulled out of the response ([`filters`]), scored
//! ([`estimators`]) and finally summarized ([`report`]). The [`runner`]
//! drives the whole flow with caching, retries and bounded parallelism.

pub mod answer;
pub mod backend;
pub mod config;
pub mod dataset;
pub mod estimators;
pub mod filters;
pub mod prompt;
pub mod report;
pub mod runner;

pub use answer::{AnswerValue, GroundTruth, Letter, LetterSet, QuestionType, YesNo};
pub use backend::{
    Backend, BackendCapabilities, BackendError, DecodingMode, FinishReason, GenerationOptions,
    HttpBackend, HttpBackendConfig, LoglikelihoodResult, ModelResponse, StubBackend,
};
pub use config::{BackendDescriptor, EvalConfig};
pub use dataset::{load_dataset, DatasetError, DatasetManifest, EvalItem, FewShotExemplar};
pub use estimators::{Metric, MetricValue, QuestionOutcome};
pub use filters::{extract_answer, normalize_text, AnswerExtractor, ExtractedAnswer, ExtractionStatus};
pub use prompt::{render_prompt, PromptBundle, PromptTemplate};
pub use report::{aggregate, emit_report, MetricReport, ReportFormat};
pub use runner::{EvalMode, Evaluator, RunConfig, RunRecord};
