//! Chat-completion clients.
//!
//! [`ModelClient`] wraps a [`ChatBackend`] with sampling parameters and a
//! bounded retry policy. The HTTP backend speaks the common
//! `/chat/completions` JSON protocol; [`ScriptedBackend`] replays canned
//! responses for tests and dry runs.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: "system".into(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: "user".into(), content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage { role: "assistant".into(), content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams { temperature: 0.8, top_p: 0.95, max_tokens: 2048 }
    }
}

/// Request body of the chat-completion wire protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub top_p: f64,
    pub n: u32,
    pub max_tokens: u32,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Debug, Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClientError {
    /// Connection failures, timeouts, 429 and 5xx responses. Retried.
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("expected {expected} completions, got {got}")]
    CountMismatch { expected: u32, got: usize },
    #[error("empty completion")]
    EmptyCompletion,
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
}

impl ClientError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ClientError::Transport(_))
    }
}

/// Something that can answer a chat-completion request.
pub trait ChatBackend: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<Vec<String>, ClientError>;
}

/// Where an endpoint lives. The token is named by environment variable,
/// never stored inline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointDescriptor {
    pub base_url: String,
    pub model: String,
    #[serde(default)]
    pub auth_token_env: Option<String>,
}

pub struct HttpBackend {
    url: String,
    token: Option<String>,
    http: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(endpoint: &EndpointDescriptor, timeout: Duration) -> Result<Self, ClientError> {
        let base = endpoint.base_url.trim_end_matches('/');
        let url = if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        };
        let token = match &endpoint.auth_token_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                ClientError::Transport(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok(HttpBackend { url, token, http })
    }
}

impl ChatBackend for HttpBackend {
    fn send(&self, request: &ChatRequest) -> Result<Vec<String>, ClientError> {
        let mut builder = self.http.post(&self.url).json(request);
        if let Some(token) = &self.token {
            builder = builder.bearer_auth(token);
        }
        let response = builder.send().map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = response.status();
        let text = response.text().map_err(|e| ClientError::Transport(e.to_string()))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(ClientError::Transport(format!("HTTP {status}: {text}")));
        }
        if !status.is_success() {
            return Err(ClientError::Status { status: status.as_u16(), body: text });
        }
        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| ClientError::Malformed(e.to_string()))?;
        Ok(parsed.choices.into_iter().map(|c| c.message.content.unwrap_or_default()).collect())
    }
}

type Script = dyn Fn(&ChatRequest, u64) -> Result<Vec<String>, ClientError> + Send + Sync;

/// Backend driven by a closure; the second argument counts calls from zero.
pub struct ScriptedBackend {
    script: Box<Script>,
    calls: AtomicU64,
}

impl ScriptedBackend {
    pub fn new<F>(script: F) -> Self
    where
        F: Fn(&ChatRequest, u64) -> Result<Vec<String>, ClientError> + Send + Sync + 'static,
    {
        ScriptedBackend { script: Box::new(script), calls: AtomicU64::new(0) }
    }

    /// Always answers every requested slot with `text`.
    pub fn constant(text: impl Into<String>) -> Self {
        let text = text.into();
        Self::new(move |req, _| Ok(vec![text.clone(); req.n as usize]))
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatBackend for ScriptedBackend {
    fn send(&self, request: &ChatRequest) -> Result<Vec<String>, ClientError> {
        let call = self.calls.fetch_add(1, Ordering::SeqCst);
        (self.script)(request, call)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 3, initial_backoff_ms: 1000, multiplier: 2.0 }
    }
}

impl RetryPolicy {
    pub fn no_wait() -> Self {
        RetryPolicy { initial_backoff_ms: 0, ..Default::default() }
    }

    pub fn backoff(&self, attempt: u32) -> Duration {
        let ms = self.initial_backoff_ms as f64 * self.multiplier.powi(attempt as i32);
        Duration::from_millis(ms as u64)
    }
}

/// A named model endpoint with sampling parameters and retries.
pub struct ModelClient {
    pub name: String,
    pub sampling: SamplingParams,
    pub retry: RetryPolicy,
    backend: Arc<dyn ChatBackend>,
    retries: AtomicU64,
}

impl fmt::Debug for ModelClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelClient")
            .field("name", &self.name)
            .field("sampling", &self.sampling)
            .field("retry", &self.retry)
            .finish_non_exhaustive()
    }
}

impl ModelClient {
    pub fn new(name: impl Into<String>, backend: Arc<dyn ChatBackend>) -> Self {
        ModelClient {
            name: name.into(),
            sampling: SamplingParams::default(),
            retry: RetryPolicy::default(),
            backend,
            retries: AtomicU64::new(0),
        }
    }

    pub fn http(endpoint: &EndpointDescriptor, timeout: Duration) -> Result<Self, ClientError> {
        let backend = HttpBackend::new(endpoint, timeout)?;
        Ok(Self::new(endpoint.model.clone(), Arc::new(backend)))
    }

    pub fn scripted<F>(name: impl Into<String>, script: F) -> Self
    where
        F: Fn(&ChatRequest, u64) -> Result<Vec<String>, ClientError> + Send + Sync + 'static,
    {
        Self::new(name, Arc::new(ScriptedBackend::new(script))).with_retry(RetryPolicy::no_wait())
    }

    pub fn with_sampling(mut self, sampling: SamplingParams) -> Self {
        self.sampling = sampling;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Number of retried transport failures so far.
    pub fn retry_count(&self) -> u64 {
        self.retries.load(Ordering::SeqCst)
    }

    pub fn request(&self, messages: &[ChatMessage], n: u32) -> ChatRequest {
        ChatRequest {
            model: self.name.clone(),
            messages: messages.to_vec(),
            temperature: self.sampling.temperature,
            top_p: self.sampling.top_p,
            n,
            max_tokens: self.sampling.max_tokens,
        }
    }

    /// Returns exactly `n` non-empty completions or an error.
    pub fn complete(&self, messages: &[ChatMessage], n: u32) -> Result<Vec<String>, ClientError> {
        let request = self.request(messages, n);
        let attempts = self.retry.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            match self.backend.send(&request) {
                Ok(texts) => {
                    if texts.len() != n as usize {
                        return Err(ClientError::CountMismatch { expected: n, got: texts.len() });
                    }
                    if texts.iter().any(|t| t.trim().is_empty()) {
                        return Err(ClientError::EmptyCompletion);
                    }
                    return Ok(texts);
                }
                Err(e) if e.is_retryable() => {
                    attempt += 1;
                    if attempt >= attempts {
                        return Err(ClientError::Exhausted { attempts, last: e.to_string() });
                    }
                    self.retries.fetch_add(1, Ordering::SeqCst);
                    log::warn!("{}: {e}; retry {attempt}/{}", self.name, attempts - 1);
                    let wait = self.retry.backoff(attempt - 1);
                    if !wait.is_zero() {
                        std::thread::sleep(wait);
                    }
                }
                Err(e) => return Err(e),
            }
        }
    }

    pub fn complete_one(&self, messages: &[ChatMessage]) -> Result<String, ClientError> {
        let mut texts = self.complete(messages, 1)?;
        Ok(texts.remove(0))
    }
}
