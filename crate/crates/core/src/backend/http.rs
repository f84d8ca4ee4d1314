use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::wire;
use super::{
    check_generate, check_loglikelihood, Backend, BackendCapabilities, BackendError, GenerationOptions,
    LoglikelihoodResult, ModelResponse,
};
use crate::prompt::PromptBundle;

pub const DEFAULT_API_KEY_ENV: &str = "EVALFLOW_API_KEY";

fn default_api_key_env() -> String {
    DEFAULT_API_KEY_ENV.to_string()
}

fn yes() -> bool {
    true
}

fn default_timeout_secs() -> u64 {
    120
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    pub base_url: String,
    pub model_name: String,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "yes")]
    pub supports_generation: bool,
    #[serde(default = "yes")]
    pub supports_loglikelihood: bool,
    #[serde(default)]
    pub supports_images: bool,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

impl HttpBackendConfig {
    pub fn new(base_url: &str, model_name: &str) -> Self {
        HttpBackendConfig {
            base_url: base_url.to_string(),
            model_name: model_name.to_string(),
            api_key_env: default_api_key_env(),
            supports_generation: true,
            supports_loglikelihood: true,
            supports_images: false,
            timeout_secs: default_timeout_secs(),
        }
    }
}

/// Client for an OpenAI-compatible inference server.
pub struct HttpBackend {
    client: reqwest::Client,
    base_url: String,
    api_key: Option<String>,
    caps: BackendCapabilities,
}

impl HttpBackend {
    pub fn new(config: &HttpBackendConfig) -> Result<Self, BackendError> {
        let caps = BackendCapabilities::new(
            &config.model_name,
            config.supports_generation,
            config.supports_loglikelihood,
            config.supports_images,
        )?;
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(HttpBackend {
            client,
            base_url: config.base_url.trim_end_matches('/').to_string(),
            api_key: std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty()),
            caps,
        })
    }

    async fn post(&self, path: &str, body: &Value) -> Result<(Vec<u8>, u64), BackendError> {
        let started = Instant::now();
        let mut request = self
            .client
            .post(format!("{}{path}", self.base_url))
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(wire::canonical_json(body));
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().await.map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status();
        let retry_after = response
            .headers()
            .get(reqwest::header::RETRY_AFTER)
            .and_then(|v| v.to_str().ok())
            .map(str::to_string);
        let bytes = response.bytes().await.map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(wire::classify_status(
                status.as_u16(),
                retry_after.as_deref(),
                &String::from_utf8_lossy(&bytes),
            ));
        }
        Ok((bytes.to_vec(), started.elapsed().as_millis() as u64))
    }
}

#[async_trait]
impl Backend for HttpBackend {
    fn capabilities(&self) -> &BackendCapabilities {
        &self.caps
    }

    async fn generate(&self, bundle: &PromptBundle, options: &GenerationOptions) -> Result<ModelResponse, BackendError> {
        check_generate(&self.caps, bundle)?;
        let body = wire::chat_request_body(&self.caps.model_name, bundle, options)?;
        let (bytes, latency_ms) = self.post(wire::CHAT_PATH, &body).await?;
        wire::parse_chat_reply(&bytes, latency_ms)
    }

    async fn loglikelihood(&self, context: &str, continuation: &str) -> Result<LoglikelihoodResult, BackendError> {
        check_loglikelihood(&self.caps, continuation)?;
        let body = wire::completion_request_body(&self.caps.model_name, context, continuation);
        let (bytes, _) = self.post(wire::COMPLETIONS_PATH, &body).await?;
        wire::parse_logprob_reply(&bytes, context, continuation)
    }
}
