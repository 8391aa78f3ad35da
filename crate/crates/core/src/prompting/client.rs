use std::collections::HashMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Fnv64;

pub const API_KEY_ENV: &str = "QE_SCORER_API_KEY";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: usize,
}

impl ScoreRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self { prompt: prompt.into(), temperature: 0.0, max_tokens: 16 }
    }
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum ScorerError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {code}: {body}")]
    Status { code: u16, body: String },
    #[error("malformed response: {0}")]
    BadResponse(String),
    #[error("environment variable {API_KEY_ENV} is not set")]
    MissingApiKey,
    #[error("{0}")]
    Rejected(String),
}

impl ScorerError {
    /// Whether another attempt may succeed.
    pub fn is_transient(&self) -> bool {
        match self {
            ScorerError::Transport(_) => true,
            ScorerError::Status { code, .. } => *code == 429 || *code >= 500,
            _ => false,
        }
    }
}

/// Sends one prompt and returns the model's raw text.
pub trait ScorerClient: Send + Sync {
    fn send(&self, request: &ScoreRequest) -> Result<String, ScorerError>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: usize,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, base_delay_ms: 250, max_delay_ms: 4_000 }
    }
}

impl RetryPolicy {
    pub fn immediate() -> Self {
        Self { base_delay_ms: 0, ..Self::default() }
    }

    /// Exponential backoff scaled by a jitter factor in `[1, 1.5)` derived
    /// from the prompt, so schedules are reproducible.
    pub fn delay(&self, attempt: usize, prompt: &str) -> Duration {
        let mut h = Fnv64::default();
        h.write_bytes(prompt.as_bytes());
        h.write_u64(attempt as u64);
        let jitter = 1.0 + 0.5 * (h.finish() >> 11) as f64 / (1u64 << 53) as f64;
        let base = self.base_delay_ms.saturating_mul(1 << attempt.min(16)) as f64 * jitter;
        Duration::from_millis((base as u64).min(self.max_delay_ms))
    }
}

/// Retries transient failures up to `policy.max_attempts` total attempts.
pub fn call_with_retries(client: &dyn ScorerClient, request: &ScoreRequest, policy: &RetryPolicy) -> Result<String, ScorerError> {
    let attempts = policy.max_attempts.max(1);
    let mut attempt = 0;
    loop {
        match client.send(request) {
            Ok(text) => return Ok(text),
            Err(e) if e.is_transient() && attempt + 1 < attempts => {
                std::thread::sleep(policy.delay(attempt, &request.prompt));
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Always answers with the same text.
#[derive(Clone, Debug)]
pub struct FixedClient(pub String);

impl ScorerClient for FixedClient {
    fn send(&self, _: &ScoreRequest) -> Result<String, ScorerError> {
        Ok(self.0.clone())
    }
}

/// Answers `Score: n` with `n = fnv(prompt) mod 101`.
#[derive(Clone, Copy, Debug, Default)]
pub struct HashClient;

impl ScorerClient for HashClient {
    fn send(&self, request: &ScoreRequest) -> Result<String, ScorerError> {
        let mut h = Fnv64::default();
        h.write_bytes(request.prompt.as_bytes());
        Ok(format!("Score: {}", h.finish() % 101))
    }
}

/// Looks each prompt up in a table; unknown prompts are rejected.
#[derive(Clone, Debug, Default)]
pub struct EchoTableClient {
    pub responses: HashMap<String, String>,
}

impl EchoTableClient {
    /// Answers every prompt with its record's gold score.
    pub fn echo_gold<'a>(pairs: impl IntoIterator<Item = (&'a str, f64)>) -> Self {
        Self { responses: pairs.into_iter().map(|(p, g)| (p.to_string(), format!("Score: {g}"))).collect() }
    }
}

impl ScorerClient for EchoTableClient {
    fn send(&self, request: &ScoreRequest) -> Result<String, ScorerError> {
        self.responses.get(&request.prompt).cloned().ok_or_else(|| ScorerError::Rejected("prompt not in table".into()))
    }
}

/// Fails with a transport error whenever the prompt contains `needle`, and
/// otherwise delegates.
pub struct FailingClient<C> {
    pub inner: C,
    pub needle: String,
}

impl<C: ScorerClient> ScorerClient for FailingClient<C> {
    fn send(&self, request: &ScoreRequest) -> Result<String, ScorerError> {
        if request.prompt.contains(&self.needle) {
            Err(ScorerError::Transport("injected failure".into()))
        } else {
            self.inner.send(request)
        }
    }
}

#[derive(Serialize)]
struct HttpBody<'a> {
    model: &'a str,
    prompt: &'a str,
    temperature: f64,
    max_tokens: usize,
}

/// JSON-over-HTTP scorer. Posts `{model, prompt, temperature, max_tokens}`
/// with a bearer key and reads `text`, `choices[0].text` or
/// `choices[0].message.content` from the reply.
pub struct HttpClient {
    pub endpoint: String,
    pub model: String,
    api_key: String,
    http: reqwest::blocking::Client,
}

impl HttpClient {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key: impl Into<String>,
        timeout: Duration,
    ) -> Result<Self, ScorerError> {
        let http = reqwest::blocking::Client::builder().timeout(timeout).build().map_err(|e| ScorerError::Transport(e.to_string()))?;
        Ok(Self { endpoint: endpoint.into(), model: model.into(), api_key: api_key.into(), http })
    }

    /// Reads the key from [`API_KEY_ENV`].
    pub fn from_env(endpoint: impl Into<String>, model: impl Into<String>, timeout: Duration) -> Result<Self, ScorerError> {
        match std::env::var(API_KEY_ENV) {
            Ok(key) if !key.is_empty() => Self::new(endpoint, model, key, timeout),
            _ => Err(ScorerError::MissingApiKey),
        }
    }
}

fn extract_text(v: &serde_json::Value) -> Option<&str> {
    v.get("text").or_else(|| v.pointer("/choices/0/text")).or_else(|| v.pointer("/choices/0/message/content")).and_then(|t| t.as_str())
}

impl ScorerClient for HttpClient {
    fn send(&self, request: &ScoreRequest) -> Result<String, ScorerError> {
        let body =
            HttpBody { model: &self.model, prompt: &request.prompt, temperature: request.temperature, max_tokens: request.max_tokens };
        let resp = self
            .http
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| ScorerError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| ScorerError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(ScorerError::Status { code: status.as_u16(), body: text });
        }
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| ScorerError::BadResponse(e.to_string()))?;
        extract_text(&v).map(String::from).ok_or_else(|| ScorerError::BadResponse("no text field".into()))
    }
}
