//! Chat backends: an HTTP adapter and a deterministic offline mock.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::{ChatRequest, ChatResponse, ProviderError, Role};

pub trait ChatProvider: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError>;
}

/// Spaces requests at least `interval` apart.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    next: Mutex<Instant>,
}

impl RateLimiter {
    pub fn per_second(requests: f64) -> Self {
        let interval = if requests > 0.0 { Duration::from_secs_f64(1.0 / requests) } else { Duration::ZERO };
        Self { interval, next: Mutex::new(Instant::now()) }
    }

    pub fn acquire(&self) {
        let wait = {
            let mut next = self.next.lock().expect("rate limiter lock");
            let now = Instant::now();
            let slot = (*next).max(now);
            *next = slot + self.interval;
            slot - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

pub const ENV_LLM_URL: &str = "CODEWISE_LLM_URL";
pub const ENV_LLM_KEY: &str = "CODEWISE_LLM_KEY";

/// Posts `{model, messages, temperature}` to a chat endpoint and reads the
/// answer from either `{text}` or the `choices[0].message.content` shape of
/// chat-completion services.
pub struct HttpChatProvider {
    id: String,
    url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
    limiter: Option<RateLimiter>,
}

impl HttpChatProvider {
    pub fn new(id: impl Into<String>, url: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(false).build();
        Self { id: id.into(), url: url.into(), api_key, agent: config.into(), limiter: None }
    }

    /// Reads the endpoint from `CODEWISE_LLM_URL` and an optional bearer key
    /// from `CODEWISE_LLM_KEY`.
    pub fn from_env(id: impl Into<String>, timeout: Duration) -> Option<Self> {
        let url = std::env::var(ENV_LLM_URL).ok()?;
        Some(Self::new(id, url, std::env::var(ENV_LLM_KEY).ok(), timeout))
    }

    pub fn with_rate_limit(mut self, requests_per_second: f64) -> Self {
        self.limiter = Some(RateLimiter::per_second(requests_per_second));
        self
    }
}

#[derive(Deserialize)]
struct WireChoiceMessage {
    content: String,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireChoiceMessage,
}

#[derive(Deserialize)]
struct WireResponse {
    text: Option<String>,
    #[serde(default)]
    choices: Vec<WireChoice>,
}

pub(crate) fn map_transport_error(err: ureq::Error) -> ProviderError {
    match err {
        ureq::Error::Timeout(t) => ProviderError::Timeout(t.to_string()),
        ureq::Error::StatusCode(status) => ProviderError::Http { status: Some(status), message: format!("status {status}") },
        other => ProviderError::Http { status: None, message: other.to_string() },
    }
}

impl ChatProvider for HttpChatProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        if let Some(limiter) = &self.limiter {
            limiter.acquire();
        }
        let body = serde_json::json!({
            "model": request.model_id,
            "messages": request.messages,
            "temperature": request.temperature,
        });
        let mut call = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = call.send_json(&body).map_err(map_transport_error)?;
        let status = response.status().as_u16();
        if status >= 400 {
            let message = response.body_mut().read_to_string().unwrap_or_default();
            return Err(ProviderError::Http { status: Some(status), message });
        }
        let raw: serde_json::Value = response.body_mut().read_json().map_err(map_transport_error)?;
        let wire: WireResponse =
            serde_json::from_value(raw.clone()).map_err(|e| ProviderError::InvalidResponse(e.to_string()))?;
        let text = wire
            .text
            .or_else(|| wire.choices.into_iter().next().map(|c| c.message.content))
            .ok_or_else(|| ProviderError::InvalidResponse("no text in response".into()))?;
        Ok(ChatResponse { text, metadata: raw })
    }
}

#[derive(Debug, Clone)]
pub enum MockBehavior {
    /// Always answer with the same text.
    Fixed(String),
    /// First rule whose needle occurs in the last user message wins.
    Scripted { rules: Vec<(String, String)>, default: String },
    /// Pick an answer from `choices` by hashing the whole request.
    Hashed { choices: Vec<String> },
}

/// Deterministic offline provider for tests and dry runs. Can be told to time
/// out on its first few calls to exercise retry handling.
#[derive(Debug)]
pub struct MockProvider {
    id: String,
    behavior: MockBehavior,
    fail_first: AtomicUsize,
    calls: AtomicUsize,
}

impl MockProvider {
    pub fn new(id: impl Into<String>, behavior: MockBehavior) -> Self {
        Self { id: id.into(), behavior, fail_first: AtomicUsize::new(0), calls: AtomicUsize::new(0) }
    }

    pub fn fixed(text: impl Into<String>) -> Self {
        Self::new("mock", MockBehavior::Fixed(text.into()))
    }

    pub fn always_no() -> Self {
        Self::fixed("No")
    }

    pub fn hashed(choices: Vec<String>) -> Self {
        Self::new("mock-hashed", MockBehavior::Hashed { choices })
    }

    pub fn scripted(rules: Vec<(String, String)>, default: impl Into<String>) -> Self {
        Self::new("mock-scripted", MockBehavior::Scripted { rules, default: default.into() })
    }

    /// Loads scripted rules from JSON lines `{"match": "...", "answer": "..."}`.
    pub fn scripted_from_jsonl(text: &str, default: impl Into<String>) -> Result<Self, serde_json::Error> {
        #[derive(Deserialize)]
        struct Rule {
            #[serde(rename = "match")]
            needle: String,
            answer: String,
        }
        let rules = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str::<Rule>(l).map(|r| (r.needle, r.answer)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::scripted(rules, default))
    }

    pub fn failing_first(self, n: usize) -> Self {
        self.fail_first.store(n, Ordering::SeqCst);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatProvider for MockProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if self
            .fail_first
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok()
        {
            return Err(ProviderError::Timeout("mock timeout".into()));
        }
        let text = match &self.behavior {
            MockBehavior::Fixed(text) => text.clone(),
            MockBehavior::Scripted { rules, default } => {
                let user = request.messages.iter().rev().find(|m| m.role == Role::User).map_or("", |m| &m.content);
                rules.iter().find(|(needle, _)| user.contains(needle.as_str())).map_or_else(|| default.clone(), |(_, a)| a.clone())
            }
            MockBehavior::Hashed { choices } => {
                if choices.is_empty() {
                    String::new()
                } else {
                    let digest = Sha256::digest(serde_json::to_vec(request).expect("request serializes"));
                    let n = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
                    choices[(n % choices.len() as u64) as usize].clone()
                }
            }
        };
        Ok(ChatResponse { text, metadata: serde_json::json!({ "provider": self.id }) })
    }
}
