use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::wire::{continuation_logprob, EchoToken};
use super::{
    check_generate, check_loglikelihood, Backend, BackendCapabilities, BackendError, FinishReason, GenerationOptions,
    LoglikelihoodResult, ModelResponse,
};
use crate::prompt::PromptBundle;

/// One scripted reaction to a generate call.
#[derive(Debug, Clone, PartialEq)]
pub enum StubOutcome {
    Reply(String),
    Fail(BackendError),
}

type DelayFn = dyn Fn(&str) -> Duration + Send + Sync;

/// Deterministic scripted backend.
///
/// Generation looks up the bundle's item id in the script and otherwise
/// echoes the last user turn. A script entry may be a sequence of outcomes;
/// each call consumes one and the last one repeats. Loglikelihoods come from
/// a table keyed by (context, continuation), then by continuation alone,
/// and otherwise from an additive per-character model.
pub struct StubBackend {
    caps: BackendCapabilities,
    responses: Mutex<HashMap<String, VecDeque<StubOutcome>>>,
    loglikelihoods: HashMap<(Option<String>, String), (f64, u32)>,
    delay: Option<Arc<DelayFn>>,
    generate_calls: AtomicUsize,
    loglikelihood_calls: AtomicUsize,
    in_flight: AtomicUsize,
    high_water: AtomicUsize,
}

impl Default for StubBackend {
    fn default() -> Self {
        Self::new()
    }
}

struct InFlight<'a>(&'a AtomicUsize);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Log-probability the additive model assigns to one character.
pub fn stub_char_logprob(c: char) -> f64 {
    -(1.0 + f64::from(u32::from(c) % 13)) / 4.0
}

impl StubBackend {
    pub fn new() -> Self {
        StubBackend {
            caps: BackendCapabilities::new("stub", true, true, true).expect("flags set"),
            responses: Mutex::new(HashMap::new()),
            loglikelihoods: HashMap::new(),
            delay: None,
            generate_calls: AtomicUsize::new(0),
            loglikelihood_calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            high_water: AtomicUsize::new(0),
        }
    }

    pub fn with_capabilities(mut self, caps: BackendCapabilities) -> Self {
        self.caps = caps;
        self
    }

    pub fn with_model_name(mut self, name: &str) -> Self {
        self.caps.model_name = name.to_string();
        self
    }

    pub fn script_text(self, item_id: &str, text: &str) -> Self {
        self.script_sequence(item_id, vec![StubOutcome::Reply(text.to_string())])
    }

    pub fn script_sequence(self, item_id: &str, outcomes: Vec<StubOutcome>) -> Self {
        self.responses
            .lock()
            .unwrap()
            .insert(item_id.to_string(), outcomes.into());
        self
    }

    /// `context = None` matches any context.
    pub fn script_loglikelihood(mut self, context: Option<&str>, continuation: &str, logprob: f64, tokens: u32) -> Self {
        self.loglikelihoods
            .insert((context.map(str::to_string), continuation.to_string()), (logprob, tokens));
        self
    }

    /// Sleep before answering; the function receives the item id (generate)
    /// or the continuation (loglikelihood).
    pub fn with_delay(mut self, delay: impl Fn(&str) -> Duration + Send + Sync + 'static) -> Self {
        self.delay = Some(Arc::new(delay));
        self
    }

    pub fn from_script(script: &StubScript) -> Result<Self, BackendError> {
        let caps = BackendCapabilities::new(
            script.model_name.as_deref().unwrap_or("stub"),
            script.supports_generation.unwrap_or(true),
            script.supports_loglikelihood.unwrap_or(true),
            script.supports_images.unwrap_or(true),
        )?;
        let mut stub = StubBackend::new().with_capabilities(caps);
        for (id, entry) in &script.responses {
            let outcomes = match entry {
                ScriptedResponse::Text(text) => vec![StubOutcome::Reply(text.clone())],
                ScriptedResponse::Steps(steps) => steps.iter().map(ScriptStep::to_outcome).collect(),
            };
            stub = stub.script_sequence(id, outcomes);
        }
        for entry in &script.loglikelihoods {
            stub = stub.script_loglikelihood(entry.context.as_deref(), &entry.continuation, entry.logprob, entry.tokens);
        }
        Ok(stub)
    }

    pub fn generate_calls(&self) -> usize {
        self.generate_calls.load(Ordering::SeqCst)
    }

    pub fn loglikelihood_calls(&self) -> usize {
        self.loglikelihood_calls.load(Ordering::SeqCst)
    }

    /// Largest number of requests that were ever in flight at once.
    pub fn high_water_mark(&self) -> usize {
        self.high_water.load(Ordering::SeqCst)
    }

    pub fn reset_counters(&self) {
        self.generate_calls.store(0, Ordering::SeqCst);
        self.loglikelihood_calls.store(0, Ordering::SeqCst);
        self.high_water.store(0, Ordering::SeqCst);
    }

    fn enter(&self) -> InFlight<'_> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.high_water.fetch_max(now, Ordering::SeqCst);
        InFlight(&self.in_flight)
    }

    async fn pause(&self, key: &str) {
        if let Some(delay) = &self.delay {
            let d = delay(key);
            if !d.is_zero() {
                tokio::time::sleep(d).await;
            }
        }
    }

    fn next_outcome(&self, item_id: Option<&str>) -> Option<StubOutcome> {
        let mut responses = self.responses.lock().unwrap();
        let queue = responses.get_mut(item_id?)?;
        if queue.len() > 1 {
            queue.pop_front()
        } else {
            queue.front().cloned()
        }
    }
}

fn word_count(s: &str) -> u32 {
    s.split_whitespace().count() as u32
}

#[async_trait]
impl Backend for StubBackend {
    fn capabilities(&self) -> &BackendCapabilities {
        &self.caps
    }

    async fn generate(&self, bundle: &PromptBundle, _options: &GenerationOptions) -> Result<ModelResponse, BackendError> {
        check_generate(&self.caps, bundle)?;
        self.generate_calls.fetch_add(1, Ordering::SeqCst);
        let _guard = self.enter();
        self.pause(bundle.item_id.as_deref().unwrap_or("")).await;
        let text = match self.next_outcome(bundle.item_id.as_deref()) {
            Some(StubOutcome::Reply(text)) => text,
            Some(StubOutcome::Fail(err)) => return Err(err),
            None => bundle.last_user_text().unwrap_or_default().to_string(),
        };
        let prompt_tokens = bundle.system_text.as_deref().map_or(0, word_count)
            + bundle.turns.iter().map(|t| word_count(&t.text)).sum::<u32>();
        Ok(ModelResponse {
            completion_tokens: word_count(&text),
            text,
            finish_reason: FinishReason::Stop,
            token_logprobs: None,
            prompt_tokens,
            latency_ms: 0,
        })
    }

    async fn loglikelihood(&self, context: &str, continuation: &str) -> Result<LoglikelihoodResult, BackendError> {
        check_loglikelihood(&self.caps, continuation)?;
        self.loglikelihood_calls.fetch_add(1, Ordering::SeqCst);
        let _guard = self.enter();
        self.pause(continuation).await;
        let continuation_chars = continuation.chars().count() as u32;
        let scripted = self
            .loglikelihoods
            .get(&(Some(context.to_string()), continuation.to_string()))
            .or_else(|| self.loglikelihoods.get(&(None, continuation.to_string())));
        if let Some(&(total_logprob, token_count)) = scripted {
            return Ok(LoglikelihoodResult {
                total_logprob,
                token_count,
                continuation_chars,
            });
        }
        // One token per character, summed by the same span logic the HTTP
        // backend uses.
        let text: Vec<char> = context.chars().chain(continuation.chars()).collect();
        let tokens: Vec<EchoToken> = text
            .iter()
            .enumerate()
            .map(|(offset, &c)| EchoToken {
                offset,
                logprob: Some(stub_char_logprob(c)),
            })
            .collect();
        let (total_logprob, token_count) = continuation_logprob(&tokens, text.len(), context.chars().count())?;
        Ok(LoglikelihoodResult {
            total_logprob,
            token_count,
            continuation_chars,
        })
    }
}

/// On-disk form of a stub script.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StubScript {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_name: Option<String>,
    pub responses: BTreeMap<String, ScriptedResponse>,
    pub loglikelihoods: Vec<ScriptedLoglikelihood>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub supports_generation: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub supports_loglikelihood: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub supports_images: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptedResponse {
    Text(String),
    Steps(Vec<ScriptStep>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptStep {
    Text(String),
    Error(ScriptedError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedError {
    Transport,
    RateLimited,
    Refused,
    Malformed,
}

impl ScriptStep {
    fn to_outcome(&self) -> StubOutcome {
        match self {
            ScriptStep::Text(t) => StubOutcome::Reply(t.clone()),
            ScriptStep::Error(kind) => StubOutcome::Fail(match kind {
                ScriptedError::Transport => BackendError::Transport("scripted transport failure".into()),
                ScriptedError::RateLimited => BackendError::RateLimited { retry_after: None },
                ScriptedError::Refused => BackendError::Refused {
                    status: 400,
                    body: "scripted refusal".into(),
                },
                ScriptedError::Malformed => BackendError::MalformedReply("scripted malformed reply".into()),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedLoglikelihood {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    pub continuation: String,
    pub logprob: f64,
    pub tokens: u32,
}
