//! OpenAI-compatible wire format: request bodies, reply parsing and status
//! classification. Kept free of I/O so it can be checked against golden
//! fixtures.

use std::path::Path;
use std::time::Duration;

use base64::Engine;
use serde_json::{json, Map, Value};

use super::{BackendError, DecodingMode, FinishReason, GenerationOptions, LoglikelihoodResult, ModelResponse, TokenLogprob};
use crate::prompt::{PromptBundle, Role, Turn};

pub const CHAT_PATH: &str = "/v1/chat/completions";
pub const COMPLETIONS_PATH: &str = "/v1/completions";

/// Rebuild every object with lexicographically sorted keys.
pub fn canonicalize(value: &Value) -> Value {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let mut out = Map::new();
            for k in keys {
                out.insert(k.clone(), canonicalize(&map[k]));
            }
            Value::Object(out)
        }
        Value::Array(items) => Value::Array(items.iter().map(canonicalize).collect()),
        other => other.clone(),
    }
}

/// Compact JSON with sorted keys.
pub fn canonical_json(value: &Value) -> String {
    serde_json::to_string(&canonicalize(value)).expect("JSON values always serialize")
}

fn mime_for(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "application/octet-stream",
    }
}

/// Read an image and encode it as a data URI.
pub fn encode_image(path: &Path) -> Result<String, BackendError> {
    let bytes = std::fs::read(path).map_err(|e| BackendError::Attachment {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
    Ok(format!("data:{};base64,{encoded}", mime_for(path)))
}

fn message(turn: &Turn) -> Result<Value, BackendError> {
    let role = match turn.role {
        Role::User => "user",
        Role::Assistant => "assistant",
    };
    if turn.attachments.is_empty() {
        return Ok(json!({"role": role, "content": turn.text}));
    }
    let mut parts = vec![json!({"type": "text", "text": turn.text})];
    for path in &turn.attachments {
        parts.push(json!({"type": "image_url", "image_url": {"url": encode_image(path)?}}));
    }
    Ok(json!({"role": role, "content": parts}))
}

/// Body for `POST /v1/chat/completions`.
pub fn chat_request_body(model: &str, bundle: &PromptBundle, options: &GenerationOptions) -> Result<Value, BackendError> {
    let mut messages = Vec::with_capacity(bundle.turns.len() + 1);
    if let Some(system) = &bundle.system_text {
        messages.push(json!({"role": "system", "content": system}));
    }
    for turn in &bundle.turns {
        messages.push(message(turn)?);
    }
    let mode = options.effective_mode();
    let temperature = if mode == DecodingMode::Sample { options.temperature } else { 0.0 };
    let mut body = json!({
        "model": model,
        "messages": messages,
        "temperature": temperature,
        "max_tokens": options.max_new_tokens,
    });
    let obj = body.as_object_mut().expect("object literal");
    if !options.stop_sequences.is_empty() {
        obj.insert("stop".into(), json!(options.stop_sequences));
    }
    if let Some(seed) = options.seed {
        obj.insert("seed".into(), json!(seed));
    }
    if mode == DecodingMode::Beam {
        obj.insert("use_beam_search".into(), json!(true));
    }
    Ok(canonicalize(&body))
}

/// Body for `POST /v1/completions` scoring `context + continuation` with
/// echoed prompt logprobs. One token is generated because some servers
/// reject `max_tokens: 0`; it is ignored when summing.
pub fn completion_request_body(model: &str, context: &str, continuation: &str) -> Value {
    canonicalize(&json!({
        "model": model,
        "prompt": format!("{context}{continuation}"),
        "max_tokens": 1,
        "temperature": 0.0,
        "logprobs": 1,
        "echo": true,
    }))
}

fn parse_json(body: &[u8]) -> Result<Value, BackendError> {
    serde_json::from_slice(body).map_err(|e| BackendError::MalformedReply(format!("invalid JSON: {e}")))
}

fn first_choice(reply: &Value) -> Result<&Value, BackendError> {
    reply
        .get("choices")
        .and_then(Value::as_array)
        .and_then(|c| c.first())
        .ok_or_else(|| BackendError::MalformedReply("missing choices[0]".into()))
}

pub fn parse_chat_reply(body: &[u8], latency_ms: u64) -> Result<ModelResponse, BackendError> {
    let reply = parse_json(body)?;
    let choice = first_choice(&reply)?;
    let message = choice
        .get("message")
        .ok_or_else(|| BackendError::MalformedReply("missing choices[0].message".into()))?;
    let text = match message.get("content") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(BackendError::MalformedReply("message content is not a string".into())),
    };
    let finish_reason = match choice.get("finish_reason").and_then(Value::as_str) {
        None | Some("stop" | "eos" | "end_turn") => FinishReason::Stop,
        Some("length") => FinishReason::Length,
        Some(_) => FinishReason::Error,
    };
    let token_logprobs = choice
        .get("logprobs")
        .and_then(|l| l.get("content"))
        .and_then(Value::as_array)
        .map(|entries| {
            entries
                .iter()
                .map(|e| {
                    Some(TokenLogprob {
                        token: e.get("token")?.as_str()?.to_string(),
                        logprob: e.get("logprob")?.as_f64()?,
                    })
                })
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| BackendError::MalformedReply("bad logprobs.content entry".into()))
        })
        .transpose()?;
    let usage = |key: &str| {
        reply
            .get("usage")
            .and_then(|u| u.get(key))
            .and_then(Value::as_u64)
            .unwrap_or(0) as u32
    };
    Ok(ModelResponse {
        text,
        finish_reason,
        token_logprobs,
        prompt_tokens: usage("prompt_tokens"),
        completion_tokens: usage("completion_tokens"),
        latency_ms,
    })
}

/// One echoed prompt token: character offset into the echoed text and its
/// log-probability (absent for the very first token on most servers).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EchoToken {
    pub offset: usize,
    pub logprob: Option<f64>,
}

/// Sum the log-probabilities of the tokens covering the continuation.
///
/// A token whose span ends past `context_chars` belongs to the
/// continuation, so a token straddling the boundary is counted. Tokens
/// starting at or after `prompt_chars` were generated and are ignored.
pub fn continuation_logprob(
    tokens: &[EchoToken],
    prompt_chars: usize,
    context_chars: usize,
) -> Result<(f64, u32), BackendError> {
    let mut total = 0.0;
    let mut count = 0u32;
    for (i, token) in tokens.iter().enumerate() {
        if token.offset >= prompt_chars {
            break;
        }
        let end = tokens.get(i + 1).map_or(prompt_chars, |next| next.offset.min(prompt_chars));
        if end < token.offset {
            return Err(BackendError::MalformedReply("token offsets are not monotonic".into()));
        }
        if end <= context_chars {
            continue;
        }
        let logprob = token
            .logprob
            .filter(|lp| lp.is_finite())
            .ok_or_else(|| BackendError::MalformedReply(format!("token {i} in the continuation has no logprob")))?;
        total += logprob;
        count += 1;
    }
    if count == 0 {
        return Err(BackendError::MalformedReply("no tokens cover the continuation".into()));
    }
    Ok((total, count))
}

pub fn parse_logprob_reply(body: &[u8], context: &str, continuation: &str) -> Result<LoglikelihoodResult, BackendError> {
    let reply = parse_json(body)?;
    let logprobs = first_choice(&reply)?
        .get("logprobs")
        .filter(|v| !v.is_null())
        .ok_or_else(|| BackendError::MalformedReply("missing logprobs".into()))?;
    let array = |key: &str| {
        logprobs
            .get(key)
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::MalformedReply(format!("missing logprobs.{key}")))
    };
    let offsets = array("text_offset")?;
    let values = array("token_logprobs")?;
    if offsets.len() != values.len() {
        return Err(BackendError::MalformedReply("text_offset and token_logprobs differ in length".into()));
    }
    let tokens = offsets
        .iter()
        .zip(values)
        .map(|(offset, logprob)| {
            let offset = offset
                .as_u64()
                .ok_or_else(|| BackendError::MalformedReply("non-integer text_offset".into()))?;
            let logprob = match logprob {
                Value::Null => None,
                v => Some(v.as_f64().ok_or_else(|| BackendError::MalformedReply("non-numeric logprob".into()))?),
            };
            Ok(EchoToken {
                offset: offset as usize,
                logprob,
            })
        })
        .collect::<Result<Vec<_>, BackendError>>()?;
    let context_chars = context.chars().count();
    let continuation_chars = continuation.chars().count();
    let (total_logprob, token_count) = continuation_logprob(&tokens, context_chars + continuation_chars, context_chars)?;
    Ok(LoglikelihoodResult {
        total_logprob,
        token_count,
        continuation_chars: continuation_chars as u32,
    })
}

fn parse_retry_after(value: &str) -> Option<Duration> {
    let secs: f64 = value.trim().parse().ok()?;
    (secs.is_finite() && secs >= 0.0).then(|| Duration::from_secs_f64(secs))
}

/// Map a non-success HTTP status onto the error taxonomy. Server errors
/// are treated as transport failures so they are retried.
pub fn classify_status(status: u16, retry_after: Option<&str>, body: &str) -> BackendError {
    match status {
        429 => BackendError::RateLimited {
            retry_after: retry_after.and_then(parse_retry_after),
        },
        400..=499 => BackendError::Refused {
            status,
            body: body.chars().take(500).collect(),
        },
        _ => BackendError::Transport(format!("server returned status {status}")),
    }
}
