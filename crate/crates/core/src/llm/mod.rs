//! LLM bridge: prompt rendering, provider calls with caching and retries,
//! and parsing of code answers.

mod parse;
mod provider;
mod templates;

use std::collections::HashMap;
use std::io::BufRead;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use parse::{parse_code_response, split_rationale, ParsedResponse};
pub use provider::{
    ChatProvider, HttpChatProvider, MockBehavior, MockProvider, RateLimiter, ENV_LLM_KEY, ENV_LLM_URL,
};
pub use templates::{fill, render_prompt, with_rationale_request, PromptInput, PromptTemplateKind, RATIONALE_REQUEST};

use crate::corpus::CorpusIndex;
use crate::domain::{AdjudicationCase, CodeId, Codebook, DialogueTurn, LlmSuggestion, ParseStatus, Verdict, VerdictMatrix};

pub const DEFAULT_TEMPERATURE: f64 = 0.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProviderError {
    #[error("provider timed out: {0}")]
    Timeout(String),
    #[error("provider http error (status {status:?}): {message}")]
    Http { status: Option<u16>, message: String },
    #[error("invalid provider response: {0}")]
    InvalidResponse(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LlmError {
    #[error("missing input for placeholder {0}")]
    MissingPlaceholderInput(&'static str),
    #[error("input {0} is not accepted by this template")]
    UnexpectedInput(&'static str),
    #[error("unknown placeholder {{{0}}}")]
    UnknownPlaceholder(String),
    #[error("unknown code {0:?}")]
    UnknownCode(String),
    #[error("empty response")]
    EmptyResponse,
    #[error("response {0:?} is neither yes nor no")]
    AmbiguousBinary(String),
    #[error("provider timed out after {attempts} attempts: {message}")]
    ProviderTimeout { attempts: u32, message: String },
    #[error("provider failed after {attempts} attempts: {message}")]
    ProviderHttp { attempts: u32, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

impl ChatRequest {
    /// Hex SHA-256 over the canonical JSON of model, messages and temperature.
    pub fn cache_key(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("request serializes");
        hex::encode(Sha256::digest(canonical))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { attempts: 3, base_delay: Duration::from_millis(500) }
    }
}

impl RetryPolicy {
    pub fn immediate(attempts: u32) -> Self {
        Self { attempts, base_delay: Duration::ZERO }
    }
}

/// Response cache keyed by [`ChatRequest::cache_key`]. Concurrent readers,
/// serialized writers.
#[derive(Debug, Default)]
pub struct ResponseCache {
    entries: RwLock<HashMap<String, ChatResponse>>,
    hits: AtomicUsize,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    response: ChatResponse,
}

impl ResponseCache {
    pub fn get(&self, key: &str) -> Option<ChatResponse> {
        let hit = self.entries.read().expect("cache lock").get(key).cloned();
        if hit.is_some() {
            self.hits.fetch_add(1, Ordering::Relaxed);
        }
        hit
    }

    pub fn insert(&self, key: String, response: ChatResponse) {
        self.entries.write().expect("cache lock").insert(key, response);
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn load_jsonl(source: impl BufRead) -> std::io::Result<Self> {
        let cache = Self::default();
        for line in source.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CacheLine = serde_json::from_str(&line).map_err(std::io::Error::other)?;
            cache.insert(entry.key, entry.response);
        }
        Ok(cache)
    }

    /// Entries sorted by key, one JSON object per line.
    pub fn to_jsonl(&self) -> Vec<u8> {
        let entries = self.entries.read().expect("cache lock");
        let mut keys: Vec<_> = entries.keys().collect();
        keys.sort();
        let mut out = Vec::new();
        for key in keys {
            let line = CacheLine { key: key.clone(), response: entries[key].clone() };
            serde_json::to_writer(&mut out, &line).expect("cache line serializes");
            out.push(b'\n');
        }
        out
    }
}

/// Provider front-end: cache lookup, then up to `retry.attempts` calls with
/// exponential backoff.
pub struct LlmClient {
    provider: Arc<dyn ChatProvider>,
    model_id: String,
    cache: Arc<ResponseCache>,
    retry: RetryPolicy,
    parallelism: usize,
}

impl LlmClient {
    pub fn new(provider: Arc<dyn ChatProvider>, model_id: impl Into<String>) -> Self {
        Self {
            provider,
            model_id: model_id.into(),
            cache: Arc::new(ResponseCache::default()),
            retry: RetryPolicy::default(),
            parallelism: 4,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_cache(mut self, cache: Arc<ResponseCache>) -> Self {
        self.cache = cache;
        self
    }

    pub fn with_parallelism(mut self, n: usize) -> Self {
        self.parallelism = n.max(1);
        self
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn provider_id(&self) -> &str {
        self.provider.id()
    }

    pub fn cache(&self) -> &Arc<ResponseCache> {
        &self.cache
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let key = request.cache_key();
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit);
        }
        let attempts = self.retry.attempts.max(1);
        let mut last = None;
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.retry.base_delay * 2u32.pow(attempt - 1));
            }
            match self.provider.complete(request) {
                Ok(response) => {
                    self.cache.insert(key, response.clone());
                    return Ok(response);
                }
                Err(err) => {
                    tracing::warn!(provider = self.provider.id(), attempt = attempt + 1, %err, "provider call failed");
                    last = Some(err);
                }
            }
        }
        Err(match last.expect("at least one attempt") {
            ProviderError::Timeout(message) => LlmError::ProviderTimeout { attempts, message },
            other => LlmError::ProviderHttp { attempts, message: other.to_string() },
        })
    }

    fn pool(&self) -> rayon::ThreadPool {
        rayon::ThreadPoolBuilder::new().num_threads(self.parallelism).build().expect("thread pool")
    }
}

/// Turns a provider answer into a suggestion record. Parse problems never
/// fail the call: they are reflected in `parse_status`.
pub fn suggestion_from_response(turn_id: &str, text: &str, provider_id: &str, cb: &Codebook) -> LlmSuggestion {
    let (code_part, rationale) = split_rationale(text);
    let (candidates, unknown_tokens, parse_status) =
        match parse_code_response(code_part, cb, PromptTemplateKind::FullScope) {
            Ok(ParsedResponse::Codes { codes, unknown }) => {
                let status = if unknown.is_empty() { ParseStatus::Ok } else { ParseStatus::Partial };
                (codes, unknown, status)
            }
            Ok(ParsedResponse::Binary(_)) | Err(_) => (Vec::new(), Vec::new(), ParseStatus::Failed),
        };
    LlmSuggestion {
        turn_id: turn_id.to_string(),
        candidates,
        unknown_tokens,
        rationale,
        raw_response: text.to_string(),
        provider_id: provider_id.to_string(),
        parse_status,
    }
}

/// Asks the model for candidate codes and a one-sentence rationale for an
/// escalated case.
pub fn suggest(
    case: &AdjudicationCase,
    client: &LlmClient,
    cb: &Codebook,
    kind: PromptTemplateKind,
    case_background: Option<&str>,
) -> Result<LlmSuggestion, LlmError> {
    let input = PromptInput {
        turn: Some(&case.turn),
        context: &case.context,
        response: case.response.as_ref(),
        case_background,
        ..Default::default()
    };
    let request = with_rationale_request(render_prompt(kind, cb, &input, client.model_id())?);
    let response = client.complete(&request)?;
    Ok(suggestion_from_response(&case.turn_id, &response.text, client.provider_id(), cb))
}

/// Suggestions for many cases, in input order.
pub fn suggest_all(
    cases: &[AdjudicationCase],
    client: &LlmClient,
    cb: &Codebook,
    case_background: Option<&str>,
) -> Result<Vec<LlmSuggestion>, LlmError> {
    client.pool().install(|| {
        cases
            .par_iter()
            .map(|case| suggest(case, client, cb, PromptTemplateKind::FullScope, case_background))
            .collect()
    })
}

/// A turn with the context a prompt needs.
#[derive(Debug, Clone, Copy)]
pub struct TurnView<'a> {
    pub turn: &'a DialogueTurn,
    pub context: &'a [DialogueTurn],
    pub response: Option<&'a DialogueTurn>,
}

impl<'a> TurnView<'a> {
    pub fn from_index(index: &'a CorpusIndex, turn: &'a DialogueTurn, window: usize) -> Self {
        Self { turn, context: index.context(&turn.turn_id, window), response: index.response(&turn.turn_id) }
    }
}

/// Codes each turn once with the given template, returning the raw answer
/// and the parsed candidates (empty when unparseable).
pub fn code_turns(
    turns: &[TurnView<'_>],
    kind: PromptTemplateKind,
    code_subset: Option<&[CodeId]>,
    client: &LlmClient,
    cb: &Codebook,
    case_background: Option<&str>,
) -> Result<Vec<LlmSuggestion>, LlmError> {
    client.pool().install(|| {
        turns
            .par_iter()
            .map(|view| {
                let input = PromptInput {
                    turn: Some(view.turn),
                    context: view.context,
                    response: view.response,
                    code_subset,
                    case_background,
                    target_code: None,
                };
                let request = render_prompt(kind, cb, &input, client.model_id())?;
                let response = client.complete(&request)?;
                let mut s = suggestion_from_response(&view.turn.turn_id, &response.text, client.provider_id(), cb);
                if kind != PromptTemplateKind::FullScope {
                    // reparse under the kind's own rules (e.g. slash-separated names)
                    if let Ok(ParsedResponse::Codes { codes, unknown }) = parse_code_response(&response.text, cb, kind) {
                        s.parse_status = if unknown.is_empty() { ParseStatus::Ok } else { ParseStatus::Partial };
                        s.candidates = codes;
                        s.unknown_tokens = unknown;
                    }
                }
                Ok(s)
            })
            .collect()
    })
}

/// One yes/no judgment per (turn, code), turn-major in codebook order of
/// `codes`. Unparseable answers become [`Verdict::Unparsed`].
pub fn binary_judge_batch(
    turns: &[TurnView<'_>],
    codes: &[CodeId],
    client: &LlmClient,
    cb: &Codebook,
    case_background: Option<&str>,
) -> Result<VerdictMatrix, LlmError> {
    let jobs: Vec<(usize, usize)> = (0..turns.len()).flat_map(|t| (0..codes.len()).map(move |c| (t, c))).collect();
    let verdicts = client.pool().install(|| {
        jobs.par_iter()
            .map(|&(t, c)| {
                let view = turns[t];
                let input = PromptInput {
                    turn: Some(view.turn),
                    context: view.context,
                    response: view.response,
                    target_code: Some(codes[c].as_str()),
                    case_background,
                    code_subset: None,
                };
                let request = render_prompt(PromptTemplateKind::BinaryJudgment, cb, &input, client.model_id())?;
                let response = client.complete(&request)?;
                Ok(match parse_code_response(&response.text, cb, PromptTemplateKind::BinaryJudgment) {
                    Ok(ParsedResponse::Binary(v)) => v,
                    _ => Verdict::Unparsed,
                })
            })
            .collect::<Result<Vec<_>, LlmError>>()
    })?;
    Ok(VerdictMatrix {
        turn_ids: turns.iter().map(|v| v.turn.turn_id.clone()).collect(),
        codes: codes.to_vec(),
        verdicts,
    })
}
