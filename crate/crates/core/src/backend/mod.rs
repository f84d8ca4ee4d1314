//! Inference backends.
//!
//! A backend answers two kinds of requests: free generation for a rendered
//! conversation, and the loglikelihood of a continuation given a context.
//! [`HttpBackend`] talks to an OpenAI-compatible server; [`StubBackend`] is
//! a deterministic scripted stand-in used by tests and offline runs.

mod http;
mod stub;
pub mod wire;

use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::PromptBundle;

pub use http::{HttpBackend, HttpBackendConfig, DEFAULT_API_KEY_ENV};
pub use stub::{
    stub_char_logprob, ScriptStep, ScriptedError, ScriptedLoglikelihood, ScriptedResponse, StubBackend, StubOutcome, StubScript,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodingMode {
    #[default]
    Greedy,
    Sample,
    Beam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationOptions {
    pub temperature: f64,
    pub max_new_tokens: u32,
    pub stop_sequences: Vec<String>,
    pub decoding_mode: DecodingMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        GenerationOptions {
            temperature: 0.0,
            max_new_tokens: 512,
            stop_sequences: Vec::new(),
            decoding_mode: DecodingMode::Greedy,
            seed: None,
        }
    }
}

impl GenerationOptions {
    /// Sampling at temperature zero is greedy decoding.
    pub fn effective_mode(&self) -> DecodingMode {
        match self.decoding_mode {
            DecodingMode::Sample if self.temperature == 0.0 => DecodingMode::Greedy,
            mode => mode,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(format!("temperature must be finite and >= 0, got {}", self.temperature));
        }
        if self.max_new_tokens == 0 {
            return Err("max_new_tokens must be positive".to_string());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    pub finish_reason: FinishReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoglikelihoodResult {
    pub total_logprob: f64,
    pub token_count: u32,
    pub continuation_chars: u32,
}

impl LoglikelihoodResult {
    /// Log-probability per continuation character.
    pub fn per_char(&self) -> f64 {
        self.total_logprob / f64::from(self.continuation_chars.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendCapabilities {
    pub supports_generation: bool,
    pub supports_loglikelihood: bool,
    pub supports_images: bool,
    pub model_name: String,
}

impl BackendCapabilities {
    pub fn new(
        model_name: &str,
        supports_generation: bool,
        supports_loglikelihood: bool,
        supports_images: bool,
    ) -> Result<Self, BackendError> {
        if !(supports_generation || supports_loglikelihood || supports_images) {
            return Err(BackendError::Config(format!(
                "backend `{model_name}` declares no capability"
            )));
        }
        Ok(BackendCapabilities {
            supports_generation,
            supports_loglikelihood,
            supports_images,
            model_name: model_name.to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Capability {
    Generation,
    Loglikelihood,
    Images,
}

impl std::fmt::Display for Capability {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Capability::Generation => "generation",
            Capability::Loglikelihood => "loglikelihood",
            Capability::Images => "image input",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited (retry after {retry_after:?})")]
    RateLimited { retry_after: Option<Duration> },
    #[error("backend refused request with status {status}: {body}")]
    Refused { status: u16, body: String },
    #[error("malformed reply: {0}")]
    MalformedReply(String),
    #[error("backend does not support {0}")]
    Unsupported(Capability),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("cannot attach {path}: {reason}")]
    Attachment { path: String, reason: String },
    #[error("backend configuration error: {0}")]
    Config(String),
}

impl BackendError {
    /// Only transport failures and rate limiting are worth retrying.
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_) | BackendError::RateLimited { .. })
    }
}

/// Uniform inference contract. Implementations must be safe for
/// concurrent requests; all per-request state lives in the call.
#[async_trait]
pub trait Backend: Send + Sync {
    fn capabilities(&self) -> &BackendCapabilities;

    async fn generate(&self, bundle: &PromptBundle, options: &GenerationOptions) -> Result<ModelResponse, BackendError>;

    /// Sum of log-probabilities of `continuation` given `context`.
    async fn loglikelihood(&self, context: &str, continuation: &str) -> Result<LoglikelihoodResult, BackendError>;
}

/// Shared precondition checks for [`Backend::generate`].
pub fn check_generate(caps: &BackendCapabilities, bundle: &PromptBundle) -> Result<(), BackendError> {
    if !caps.supports_generation {
        return Err(BackendError::Unsupported(Capability::Generation));
    }
    if bundle.attachments().next().is_some() && !caps.supports_images {
        return Err(BackendError::Unsupported(Capability::Images));
    }
    if bundle.turns.last().map(|t| t.role) != Some(crate::prompt::Role::User) {
        return Err(BackendError::InvalidRequest("conversation must end with a user turn".into()));
    }
    Ok(())
}

/// Shared precondition checks for [`Backend::loglikelihood`].
pub fn check_loglikelihood(caps: &BackendCapabilities, continuation: &str) -> Result<(), BackendError> {
    if !caps.supports_loglikelihood {
        return Err(BackendError::Unsupported(Capability::Loglikelihood));
    }
    if continuation.is_empty() {
        return Err(BackendError::InvalidRequest("continuation must not be empty".into()));
    }
    Ok(())
}
