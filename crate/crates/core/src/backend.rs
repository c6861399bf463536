//! Text-generation backends: an HTTP chat-completions client and a
//! scripted backend that replays fixed outputs for tests and dry runs.

use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub const DEFAULT_BASE_URL: &str = "http://127.0.0.1:8000/v1";
pub const BACKEND_URL_ENV: &str = "PARLOR_BACKEND_URL";
pub const API_KEY_ENV: &str = "PARLOR_API_KEY";

/// Why a request was issued. Lets capture sinks tell conversation-turn
/// prompts apart from scheduler questions and surveys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestPurpose {
    Turn,
    Schedule,
    Survey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub temperature: f64,
    pub max_tokens: u32,
    pub stop: Option<Vec<String>>,
}

impl Default for Sampling {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            max_tokens: 256,
            stop: None,
        }
    }
}

/// One prompt turn. A `None` speaker marks an instruction rather than a
/// history line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTurn {
    pub speaker: Option<String>,
    pub text: String,
}

impl PromptTurn {
    pub fn said(speaker: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            speaker: Some(speaker.into()),
            text: text.into(),
        }
    }

    pub fn instruction(text: impl Into<String>) -> Self {
        Self {
            speaker: None,
            text: text.into(),
        }
    }

    /// "Name: text", or the bare text for instructions.
    pub fn render(&self) -> String {
        match &self.speaker {
            Some(s) => format!("{s}: {}", self.text),
            None => self.text.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendRequest {
    pub purpose: RequestPurpose,
    pub model_id: String,
    pub system_text: String,
    pub turns: Vec<PromptTurn>,
    pub sampling: Sampling,
}

impl BackendRequest {
    /// The whole prompt as one string, for containment checks.
    pub fn full_text(&self) -> String {
        let mut s = self.system_text.clone();
        for t in &self.turns {
            s.push('\n');
            s.push_str(&t.render());
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendResponse {
    pub text: String,
    pub finish_reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("server returned status {0}")]
    Status(u16),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<BackendError> },
    #[error("script is empty")]
    EmptyScript,
}

impl BackendError {
    fn retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Status(code) => *code >= 500,
            _ => false,
        }
    }
}

pub trait Backend: Send + Sync {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError>;
}

// ---------------------------------------------------------------------------

/// Replays a fixed list of outputs in order, wrapping around at the end.
/// Counts calls so tests can check how often a model was consulted.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    outputs: Vec<String>,
    state: Mutex<ScriptState>,
}

#[derive(Debug, Default)]
struct ScriptState {
    next: usize,
    calls: usize,
}

impl ScriptedBackend {
    pub fn new<I, S>(outputs: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            outputs: outputs.into_iter().map(Into::into).collect(),
            state: Mutex::default(),
        }
    }

    pub fn calls(&self) -> usize {
        self.state.lock().unwrap().calls
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, _request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let mut state = self.state.lock().unwrap();
        state.calls += 1;
        if self.outputs.is_empty() {
            return Err(BackendError::EmptyScript);
        }
        let text = self.outputs[state.next % self.outputs.len()].clone();
        state.next += 1;
        Ok(BackendResponse {
            text,
            finish_reason: "stop".into(),
        })
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 1,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EndpointConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: DEFAULT_BASE_URL.into(),
            api_key: None,
            timeout: Duration::from_secs(60),
            retry: RetryPolicy::default(),
        }
    }
}

impl EndpointConfig {
    /// Defaults overridden by `PARLOR_BACKEND_URL` and `PARLOR_API_KEY`.
    pub fn from_env() -> Self {
        let mut cfg = Self::default();
        if let Ok(url) = std::env::var(BACKEND_URL_ENV) {
            if !url.is_empty() {
                cfg.base_url = url;
            }
        }
        cfg.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        cfg
    }
}

/// Client for any server speaking the chat-completions wire format.
/// Cheap to clone; clones share the connection pool.
#[derive(Clone)]
pub struct EndpointBackend {
    agent: ureq::Agent,
    config: EndpointConfig,
}

impl std::fmt::Debug for EndpointBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EndpointBackend")
            .field("base_url", &self.config.base_url)
            .field("has_api_key", &self.config.api_key.is_some())
            .field("retry", &self.config.retry)
            .finish()
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: Option<String>,
}

impl EndpointBackend {
    pub fn new(config: EndpointConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { agent, config }
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    /// Same connection pool, different server.
    pub fn with_base_url(&self, base_url: &str) -> Self {
        let mut config = self.config.clone();
        config.base_url = base_url.to_string();
        Self {
            agent: self.agent.clone(),
            config,
        }
    }

    pub fn completions_url(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    /// The JSON body sent for `request`.
    pub fn request_body(request: &BackendRequest) -> Value {
        let mut messages = vec![json!({"role": "system", "content": request.system_text})];
        messages.extend(
            request
                .turns
                .iter()
                .map(|t| json!({"role": "user", "content": t.render()})),
        );
        let mut body = json!({
            "model": request.model_id,
            "messages": messages,
            "temperature": request.sampling.temperature,
            "max_tokens": request.sampling.max_tokens,
        });
        if let Some(stop) = &request.sampling.stop {
            body["stop"] = json!(stop);
        }
        body
    }

    fn attempt(&self, body: &Value) -> Result<BackendResponse, BackendError> {
        let mut req = self.agent.post(&self.completions_url());
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(BackendError::Status(status));
        }
        let parsed: ChatResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::Malformed(e.to_string()))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Malformed("no choices".into()))?;
        Ok(BackendResponse {
            text: choice.message.content.unwrap_or_default(),
            finish_reason: choice.finish_reason.unwrap_or_else(|| "unknown".into()),
        })
    }
}

impl Backend for EndpointBackend {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let body = Self::request_body(request);
        let retry = self.config.retry;
        let mut backoff = retry.initial_backoff;
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body) {
                Ok(resp) => return Ok(resp),
                Err(e) if e.retryable() && attempts <= retry.max_retries => {
                    tracing::warn!(error = %e, attempt = attempts, "backend request failed, retrying");
                    thread::sleep(backoff);
                    backoff *= 2;
                }
                Err(e) if attempts > 1 => {
                    return Err(BackendError::Exhausted {
                        attempts,
                        last: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

// ---------------------------------------------------------------------------

/// Shared, append-only list of every request issued through a
/// [`RecordingBackend`].
#[derive(Debug, Clone, Default)]
pub struct RequestLog {
    inner: Arc<Mutex<Vec<RecordedRequest>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordedRequest {
    pub person: String,
    pub request: BackendRequest,
}

impl RequestLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, person: &str, request: &BackendRequest) {
        self.inner.lock().unwrap().push(RecordedRequest {
            person: person.to_string(),
            request: request.clone(),
        });
    }

    pub fn entries(&self) -> Vec<RecordedRequest> {
        self.inner.lock().unwrap().clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Records each request into a [`RequestLog`] before forwarding it.
pub struct RecordingBackend {
    person: String,
    inner: Arc<dyn Backend>,
    log: RequestLog,
}

impl RecordingBackend {
    pub fn new(person: impl Into<String>, inner: Arc<dyn Backend>, log: RequestLog) -> Self {
        Self {
            person: person.into(),
            inner,
            log,
        }
    }
}

impl Backend for RecordingBackend {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        self.log.push(&self.person, request);
        self.inner.complete(request)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request() -> BackendRequest {
        BackendRequest {
            purpose: RequestPurpose::Turn,
            model_id: "m".into(),
            system_text: "sys".into(),
            turns: vec![PromptTurn::said("A", "hi"), PromptTurn::instruction("Go.")],
            sampling: Sampling::default(),
        }
    }

    #[test]
    fn scripted_backend_cycles_and_counts() {
        let b = ScriptedBackend::new(["one", "two"]);
        let texts: Vec<String> = (0..3).map(|_| b.complete(&request()).unwrap().text).collect();
        assert_eq!(texts, ["one", "two", "one"]);
        assert_eq!(b.calls(), 3);
        let empty = ScriptedBackend::new(Vec::<String>::new());
        assert_eq!(empty.complete(&request()), Err(BackendError::EmptyScript));
    }

    #[test]
    fn wire_body_shape() {
        let body = EndpointBackend::request_body(&request());
        assert_eq!(body["model"], "m");
        assert_eq!(body["messages"][0], json!({"role": "system", "content": "sys"}));
        assert_eq!(body["messages"][1], json!({"role": "user", "content": "A: hi"}));
        assert_eq!(body["messages"][2], json!({"role": "user", "content": "Go."}));
        assert_eq!(body["max_tokens"], 256);
        assert!(body.get("stop").is_none());
    }

    #[test]
    fn recording_backend_logs() {
        let log = RequestLog::new();
        let b = RecordingBackend::new("A", Arc::new(ScriptedBackend::new(["x"])), log.clone());
        b.complete(&request()).unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(log.entries()[0].person, "A");
        assert!(log.entries()[0].request.full_text().contains("A: hi"));
    }

    #[test]
    fn unreachable_endpoint_is_exhausted() {
        let backend = EndpointBackend::new(EndpointConfig {
            base_url: "http://127.0.0.1:9".into(),
            api_key: None,
            timeout: Duration::from_secs(2),
            retry: RetryPolicy {
                max_retries: 1,
                initial_backoff: Duration::from_millis(1),
            },
        });
        match backend.complete(&request()) {
            Err(BackendError::Exhausted { attempts: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
