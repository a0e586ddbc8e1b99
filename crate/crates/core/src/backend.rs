//! Text-generation and embedding clients.
//!
//! [`HttpGenerator`] and [`HttpEmbedder`] talk JSON over HTTP to any chat-style
//! completion or embedding server; response field paths are configurable.
//! [`ScriptedGenerator`] and [`HashedNgramEmbedder`] are pure offline
//! implementations used by tests and offline runs.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompting::RenderedPrompt;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport failure talking to {endpoint} after {attempts} attempt(s): {message}")]
    Transport {
        endpoint: String,
        attempts: u32,
        message: String,
    },
    #[error("authentication rejected by {endpoint} (HTTP {status})")]
    Auth { endpoint: String, status: u16 },
    #[error("rate limit still exceeded at {endpoint} after {attempts} attempt(s)")]
    RateLimited { endpoint: String, attempts: u32 },
    #[error("server error from {endpoint} after {attempts} attempt(s): HTTP {status}")]
    Server {
        endpoint: String,
        attempts: u32,
        status: u16,
    },
    #[error("request rejected by {endpoint}: HTTP {status}: {body}")]
    Rejected {
        endpoint: String,
        status: u16,
        body: String,
    },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("input text is empty")]
    EmptyInput,
    #[error("no scripted response for prompt {0}")]
    NoScriptedResponse(String),
    #[error("scripted failure: {0}")]
    Scripted(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Decoding {
    pub temperature: f64,
    pub max_new_tokens: u32,
    pub seed: Option<u64>,
}

impl Default for Decoding {
    fn default() -> Self {
        Decoding {
            temperature: 0.0,
            max_new_tokens: 128,
            seed: Some(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: RenderedPrompt,
    pub decoding: Decoding,
    pub model_name: String,
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.decoding.max_new_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_new_tokens must be at least 1".into()));
        }
        if !self.decoding.temperature.is_finite() || self.decoding.temperature < 0.0 {
            return Err(BackendError::InvalidRequest(format!(
                "temperature must be finite and non-negative, got {}",
                self.decoding.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub finish_reason: FinishReason,
    pub request_index: usize,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl GenerationResult {
    fn failed(index: usize, err: &BackendError, latency_ms: u64) -> Self {
        GenerationResult {
            text: String::new(),
            finish_reason: FinishReason::Error,
            request_index: index,
            latency_ms,
            error: Some(err.to_string()),
        }
    }
}

pub trait TextGenerator: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError>;

    /// Stable description of the backend configuration for run manifests.
    fn fingerprint(&self) -> String;
}

/// Run requests with at most `max_in_flight` outstanding at once.
///
/// Results come back in input order. A failing request yields a slot with
/// `finish_reason = Error` and does not affect the others.
pub fn batch_generate(
    generator: &dyn TextGenerator,
    requests: &[GenerationRequest],
    max_in_flight: usize,
) -> Vec<GenerationResult> {
    let workers = max_in_flight.max(1).min(requests.len());
    if workers == 0 {
        return Vec::new();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<GenerationResult>>> = Mutex::new(vec![None; requests.len()]);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= requests.len() {
                    break;
                }
                let started = Instant::now();
                let result = match generator.generate(&requests[i]) {
                    Ok(mut r) => {
                        r.request_index = i;
                        r
                    }
                    Err(e) => GenerationResult::failed(i, &e, started.elapsed().as_millis() as u64),
                };
                slots.lock().expect("result slots poisoned")[i] = Some(result);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots poisoned")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

// ---------------------------------------------------------------------------
// Scripted offline generator

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedResponse {
    pub text: String,
    #[serde(default = "default_finish")]
    pub finish_reason: FinishReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn default_finish() -> FinishReason {
    FinishReason::Stop
}

impl ScriptedResponse {
    pub fn text(text: impl Into<String>) -> Self {
        ScriptedResponse {
            text: text.into(),
            finish_reason: FinishReason::Stop,
            error: None,
        }
    }

    pub fn failure(message: impl Into<String>) -> Self {
        ScriptedResponse {
            text: String::new(),
            finish_reason: FinishReason::Error,
            error: Some(message.into()),
        }
    }
}

/// One line of a script file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScriptLine {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prompt_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    contains: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    default: bool,
    #[serde(flatten)]
    response: ScriptedResponse,
}

/// Answers from a lookup table keyed by prompt fingerprint, then substring
/// rules in order, then an optional default.
#[derive(Debug, Default)]
pub struct ScriptedGenerator {
    by_fingerprint: BTreeMap<String, ScriptedResponse>,
    rules: Vec<(String, ScriptedResponse)>,
    default: Option<ScriptedResponse>,
    calls: AtomicUsize,
}

impl ScriptedGenerator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_response(mut self, prompt: &RenderedPrompt, response: ScriptedResponse) -> Self {
        self.insert(prompt.fingerprint(), response);
        self
    }

    pub fn insert(&mut self, fingerprint: String, response: ScriptedResponse) {
        self.by_fingerprint.insert(fingerprint, response);
    }

    pub fn with_rule(mut self, contains: impl Into<String>, response: ScriptedResponse) -> Self {
        self.rules.push((contains.into(), response));
        self
    }

    pub fn with_default(mut self, response: ScriptedResponse) -> Self {
        self.default = Some(response);
        self
    }

    /// Number of `generate` calls served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn from_jsonl(text: &str) -> Result<Self, BackendError> {
        let mut out = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptLine = serde_json::from_str(line)
                .map_err(|e| BackendError::Config(format!("script line {}: {e}", i + 1)))?;
            match (entry.prompt_sha256, entry.contains, entry.default) {
                (Some(fp), None, false) => out.insert(fp, entry.response),
                (None, Some(pat), false) => out.rules.push((pat, entry.response)),
                (None, None, true) => out.default = Some(entry.response),
                _ => {
                    return Err(BackendError::Config(format!(
                        "script line {}: give exactly one of prompt_sha256, contains, default",
                        i + 1
                    )))
                }
            }
        }
        Ok(out)
    }

    pub fn from_path(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("cannot read script {}: {e}", path.display())))?;
        Self::from_jsonl(&text)
    }

    /// Serialize the script. Fingerprint entries are sorted.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |line: ScriptLine| {
            out.push_str(&serde_json::to_string(&line).expect("script line serializes"));
            out.push('\n');
        };
        for (fp, r) in &self.by_fingerprint {
            push(ScriptLine {
                prompt_sha256: Some(fp.clone()),
                contains: None,
                default: false,
                response: r.clone(),
            });
        }
        for (pat, r) in &self.rules {
            push(ScriptLine {
                prompt_sha256: None,
                contains: Some(pat.clone()),
                default: false,
                response: r.clone(),
            });
        }
        if let Some(r) = &self.default {
            push(ScriptLine {
                prompt_sha256: None,
                contains: None,
                default: true,
                response: r.clone(),
            });
        }
        out
    }

    fn lookup(&self, prompt: &RenderedPrompt) -> Option<&ScriptedResponse> {
        self.by_fingerprint
            .get(&prompt.fingerprint())
            .or_else(|| {
                self.rules
                    .iter()
                    .find(|(pat, _)| prompt.user.contains(pat.as_str()))
                    .map(|(_, r)| r)
            })
            .or(self.default.as_ref())
    }
}

impl TextGenerator for ScriptedGenerator {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        request.validate()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let response = self
            .lookup(&request.prompt)
            .ok_or_else(|| BackendError::NoScriptedResponse(request.prompt.fingerprint()))?;
        if let Some(message) = &response.error {
            return Err(BackendError::Scripted(message.clone()));
        }
        Ok(GenerationResult {
            text: response.text.clone(),
            finish_reason: response.finish_reason,
            request_index: 0,
            latency_ms: 0,
            error: None,
        })
    }

    fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_jsonl().as_bytes());
        format!("scripted:{}", hex::encode(digest))
    }
}

// ---------------------------------------------------------------------------
// HTTP transport

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            initial_backoff_ms: 500,
            max_backoff_ms: 8_000,
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = self.multiplier.max(1.0).powi(retry.saturating_sub(1) as i32);
        let ms = (self.initial_backoff_ms as f64 * factor).min(self.max_backoff_ms as f64);
        Duration::from_millis(ms as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub endpoint: String,
    /// Name of the environment variable holding the secret, if any.
    pub auth_env: Option<String>,
    pub auth_header: String,
    /// Prefix placed before the secret, e.g. `Bearer`.
    pub auth_scheme: String,
    pub timeout_ms: u64,
    pub retry: RetryPolicy,
    /// Dotted path to the completion text, array indices as numbers.
    pub text_path: String,
    pub finish_reason_path: String,
    pub max_tokens_field: String,
    /// Embedding responses: dotted path to the list of items, and the vector field in each.
    pub embedding_items_path: String,
    pub embedding_vector_field: String,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            endpoint: String::new(),
            auth_env: None,
            auth_header: "Authorization".into(),
            auth_scheme: "Bearer".into(),
            timeout_ms: 60_000,
            retry: RetryPolicy::default(),
            text_path: "choices.0.message.content".into(),
            finish_reason_path: "choices.0.finish_reason".into(),
            max_tokens_field: "max_tokens".into(),
            embedding_items_path: "data".into(),
            embedding_vector_field: "embedding".into(),
        }
    }
}

impl HttpConfig {
    /// Fingerprint without secrets.
    pub fn fingerprint(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Follow a dotted path such as `choices.0.message.content`.
pub fn json_path<'a>(value: &'a Value, path: &str) -> Option<&'a Value> {
    if path.is_empty() {
        return Some(value);
    }
    path.split('.').try_fold(value, |v, part| match v {
        Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get(i)),
        Value::Object(map) => map.get(part),
        _ => None,
    })
}

struct HttpTransport {
    config: HttpConfig,
    agent: ureq::Agent,
    secret: Option<String>,
}

impl HttpTransport {
    fn new(config: HttpConfig) -> Result<Self, BackendError> {
        if config.endpoint.is_empty() {
            return Err(BackendError::Config("endpoint is empty".into()));
        }
        if config.retry.max_attempts == 0 {
            return Err(BackendError::Config("retry.max_attempts must be at least 1".into()));
        }
        let secret = match &config.auth_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| BackendError::Config(format!("auth environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let agent_config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build();
        Ok(HttpTransport {
            config,
            agent: ureq::Agent::new_with_config(agent_config),
            secret,
        })
    }

    /// POST with retries. Retries transport failures, 429 and 5xx; never
    /// retries authentication or other 4xx responses.
    fn post(&self, body: &Value) -> Result<Value, BackendError> {
        let endpoint = &self.config.endpoint;
        let max = self.config.retry.max_attempts;
        let mut last: Option<BackendError> = None;
        for attempt in 1..=max {
            if attempt > 1 {
                std::thread::sleep(self.config.retry.backoff(attempt - 1));
            }
            let mut req = self.agent.post(endpoint.as_str()).header("Content-Type", "application/json");
            if let Some(secret) = &self.secret {
                let value = if self.config.auth_scheme.is_empty() {
                    secret.clone()
                } else {
                    format!("{} {}", self.config.auth_scheme, secret)
                };
                req = req.header(self.config.auth_header.as_str(), value.as_str());
            }
            let mut response = match req.send_json(body) {
                Ok(r) => r,
                Err(e) => {
                    last = Some(BackendError::Transport {
                        endpoint: endpoint.clone(),
                        attempts: attempt,
                        message: e.to_string(),
                    });
                    continue;
                }
            };
            let status = response.status().as_u16();
            let text = response.body_mut().read_to_string().unwrap_or_default();
            match status {
                200..=299 => {
                    return serde_json::from_str(&text)
                        .map_err(|e| BackendError::Malformed(format!("response is not JSON: {e}")))
                }
                401 | 403 => {
                    return Err(BackendError::Auth {
                        endpoint: endpoint.clone(),
                        status,
                    })
                }
                429 => {
                    last = Some(BackendError::RateLimited {
                        endpoint: endpoint.clone(),
                        attempts: attempt,
                    })
                }
                500..=599 => {
                    last = Some(BackendError::Server {
                        endpoint: endpoint.clone(),
                        attempts: attempt,
                        status,
                    })
                }
                _ => {
                    return Err(BackendError::Rejected {
                        endpoint: endpoint.clone(),
                        status,
                        body: text.chars().take(200).collect(),
                    })
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

/// Chat-completion client for any JSON-over-HTTP server.
pub struct HttpGenerator {
    transport: HttpTransport,
}

impl HttpGenerator {
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        Ok(HttpGenerator {
            transport: HttpTransport::new(config)?,
        })
    }

    pub fn request_body(&self, request: &GenerationRequest) -> Value {
        let mut messages = Vec::new();
        if let Some(system) = &request.prompt.system {
            messages.push(json!({"role": "system", "content": system}));
        }
        messages.push(json!({"role": "user", "content": request.prompt.user}));
        let mut body = json!({
            "model": request.model_name,
            "messages": messages,
            "temperature": request.decoding.temperature,
        });
        body[self.transport.config.max_tokens_field.as_str()] = json!(request.decoding.max_new_tokens);
        if let Some(seed) = request.decoding.seed {
            body["seed"] = json!(seed);
        }
        body
    }
}

impl TextGenerator for HttpGenerator {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        request.validate()?;
        let started = Instant::now();
        let response = self.transport.post(&self.request_body(request))?;
        let cfg = &self.transport.config;
        let text = json_path(&response, &cfg.text_path)
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::Malformed(format!("no string at `{}`", cfg.text_path)))?;
        let finish_reason = match json_path(&response, &cfg.finish_reason_path).and_then(Value::as_str) {
            Some("length") | Some("max_tokens") => FinishReason::Length,
            _ => FinishReason::Stop,
        };
        Ok(GenerationResult {
            text: text.to_string(),
            finish_reason,
            request_index: 0,
            latency_ms: started.elapsed().as_millis() as u64,
            error: None,
        })
    }

    fn fingerprint(&self) -> String {
        format!("http:{}", self.transport.config.fingerprint())
    }
}

// ---------------------------------------------------------------------------
// Embeddings

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEmbeddings {
    pub tokens: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
}

impl TokenEmbeddings {
    pub fn new(tokens: Vec<String>, vectors: Vec<Vec<f64>>) -> Result<Self, BackendError> {
        if tokens.len() != vectors.len() {
            return Err(BackendError::Malformed(format!(
                "{} tokens but {} vectors",
                tokens.len(),
                vectors.len()
            )));
        }
        let dim = vectors.first().map(Vec::len).unwrap_or(1);
        if dim == 0 || vectors.iter().any(|v| v.len() != dim) {
            return Err(BackendError::Malformed("token vectors have inconsistent dimension".into()));
        }
        if vectors.iter().flatten().any(|x| !x.is_finite()) {
            return Err(BackendError::Malformed("non-finite embedding value".into()));
        }
        Ok(TokenEmbeddings { tokens, vectors })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map(Vec::len).unwrap_or(0)
    }

    /// Element-wise mean of the token vectors.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for v in &self.vectors {
            for (o, x) in out.iter_mut().zip(v) {
                *o += x;
            }
        }
        let n = self.vectors.len().max(1) as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }
}

pub trait TextEmbedder: Send + Sync {
    fn embed_tokens(&self, text: &str) -> Result<TokenEmbeddings, BackendError>;

    /// Single pooled vector for the whole text.
    fn embed_text(&self, text: &str) -> Result<Vec<f64>, BackendError>;

    fn fingerprint(&self) -> String;
}

/// Split on whitespace, then separate runs of alphanumerics from individual
/// punctuation characters.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for c in chunk.chars() {
            if c.is_alphanumeric() {
                word.push(c);
            } else {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(c.to_string());
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
    }
    tokens
}

fn fnv1a(bytes: &[u8], salt: u64) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325 ^ salt;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Context-free token embeddings from signed hashing of character trigrams.
///
/// Every token also gets +0.5 in a bucket chosen by a whole-token hash; since
/// trigram contributions are integers, that bucket can never cancel to zero,
/// so every vector has positive norm.
#[derive(Debug, Clone, PartialEq)]
pub struct HashedNgramEmbedder {
    dim: usize,
}

impl Default for HashedNgramEmbedder {
    fn default() -> Self {
        HashedNgramEmbedder { dim: 64 }
    }
}

impl HashedNgramEmbedder {
    pub fn new(dim: usize) -> Result<Self, BackendError> {
        if dim == 0 {
            return Err(BackendError::Config("embedding dimension must be at least 1".into()));
        }
        Ok(HashedNgramEmbedder { dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let lower = token.to_lowercase();
        let padded: Vec<char> = format!("<{lower}>").chars().collect();
        let n = 3.min(padded.len());
        for gram in padded.windows(n) {
            let s: String = gram.iter().collect();
            let h = fnv1a(s.as_bytes(), 0);
            let bucket = (h % self.dim as u64) as usize;
            v[bucket] += if h >> 63 == 1 { -1.0 } else { 1.0 };
        }
        let anchor = (fnv1a(lower.as_bytes(), 0x5bd1e995) % self.dim as u64) as usize;
        v[anchor] += 0.5;
        v
    }
}

impl TextEmbedder for HashedNgramEmbedder {
    fn embed_tokens(&self, text: &str) -> Result<TokenEmbeddings, BackendError> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(BackendError::EmptyInput);
        }
        let vectors = tokens.iter().map(|t| self.token_vector(t)).collect();
        Ok(TokenEmbeddings { tokens, vectors })
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        Ok(self.embed_tokens(text)?.mean())
    }

    fn fingerprint(&self) -> String {
        format!("hashed-ngram:d{}", self.dim)
    }
}

/// Remote embedding client. Token embeddings are requested by sending the
/// locally tokenized text as a batch input.
pub struct HttpEmbedder {
    transport: HttpTransport,
    model: String,
}

impl HttpEmbedder {
    pub fn new(config: HttpConfig, model: impl Into<String>) -> Result<Self, BackendError> {
        Ok(HttpEmbedder {
            transport: HttpTransport::new(config)?,
            model: model.into(),
        })
    }

    fn vectors(&self, input: Value, expected: usize) -> Result<Vec<Vec<f64>>, BackendError> {
        let response = self.transport.post(&json!({"model": self.model, "input": input}))?;
        let cfg = &self.transport.config;
        let items = json_path(&response, &cfg.embedding_items_path)
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::Malformed(format!("no array at `{}`", cfg.embedding_items_path)))?;
        if items.len() != expected {
            return Err(BackendError::Malformed(format!(
                "expected {expected} embeddings, got {}",
                items.len()
            )));
        }
        items
            .iter()
            .map(|item| {
                item.get(&cfg.embedding_vector_field)
                    .and_then(Value::as_array)
                    .and_then(|xs| xs.iter().map(Value::as_f64).collect::<Option<Vec<f64>>>())
                    .ok_or_else(|| BackendError::Malformed(format!("item lacks numeric `{}`", cfg.embedding_vector_field)))
            })
            .collect()
    }
}

impl TextEmbedder for HttpEmbedder {
    fn embed_tokens(&self, text: &str) -> Result<TokenEmbeddings, BackendError> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(BackendError::EmptyInput);
        }
        let vectors = self.vectors(json!(tokens), tokens.len())?;
        TokenEmbeddings::new(tokens, vectors)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::EmptyInput);
        }
        let mut vectors = self.vectors(json!([text]), 1)?;
        Ok(vectors.remove(0))
    }

    fn fingerprint(&self) -> String {
        format!("http-embed:{}:{}", self.model, self.transport.config.fingerprint())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::PromptFamily;
    use proptest::prelude::*;

    fn prompt(user: &str) -> RenderedPrompt {
        RenderedPrompt {
            system: None,
            user: user.into(),
            family: PromptFamily::DirectZeroShot,
        }
    }

    fn request(user: &str) -> GenerationRequest {
        GenerationRequest {
            prompt: prompt(user),
            decoding: Decoding::default(),
            model_name: "m".into(),
        }
    }

    #[test]
    fn scripted_lookup_order() {
        let gen = ScriptedGenerator::new()
            .with_response(&prompt("exact"), ScriptedResponse::text("Decrease"))
            .with_rule("summary", ScriptedResponse::text("a summary"))
            .with_default(ScriptedResponse::text("None"));
        assert_eq!(gen.generate(&request("exact")).unwrap().text, "Decrease");
        assert_eq!(gen.generate(&request("write a summary")).unwrap().text, "a summary");
        assert_eq!(gen.generate(&request("other")).unwrap().text, "None");
        assert_eq!(gen.calls(), 3);
        let bare = ScriptedGenerator::new();
        assert!(matches!(bare.generate(&request("x")), Err(BackendError::NoScriptedResponse(_))));
    }

    #[test]
    fn script_file_round_trip() {
        let gen = ScriptedGenerator::new()
            .with_response(&prompt("exact"), ScriptedResponse::text("Decrease"))
            .with_response(&prompt("bad"), ScriptedResponse::failure("boom"))
            .with_rule("summary", ScriptedResponse::text("a summary"))
            .with_default(ScriptedResponse::text("None"));
        let text = gen.to_jsonl();
        let again = ScriptedGenerator::from_jsonl(&text).unwrap();
        assert_eq!(again.to_jsonl(), text);
        assert_eq!(again.fingerprint(), gen.fingerprint());
        assert!(matches!(again.generate(&request("bad")), Err(BackendError::Scripted(_))));
        assert!(ScriptedGenerator::from_jsonl(r#"{"text": "x"}"#).is_err());
    }

    #[test]
    fn invalid_decoding_rejected() {
        let gen = ScriptedGenerator::new().with_default(ScriptedResponse::text("x"));
        let mut r = request("a");
        r.decoding.max_new_tokens = 0;
        assert!(matches!(gen.generate(&r), Err(BackendError::InvalidRequest(_))));
        r.decoding.max_new_tokens = 1;
        r.decoding.temperature = f64::NAN;
        assert!(matches!(gen.generate(&r), Err(BackendError::InvalidRequest(_))));
    }

    #[test]
    fn batch_keeps_order_and_isolates_failures() {
        let mut gen = ScriptedGenerator::new();
        for i in 0..10 {
            let resp = if i == 4 {
                ScriptedResponse::failure("down")
            } else {
                ScriptedResponse::text(format!("out{i}"))
            };
            gen.insert(prompt(&format!("p{i}")).fingerprint(), resp);
        }
        let reqs: Vec<_> = (0..10).map(|i| request(&format!("p{i}"))).collect();
        let out = batch_generate(&gen, &reqs, 3);
        assert_eq!(out.len(), 10);
        for (i, r) in out.iter().enumerate() {
            assert_eq!(r.request_index, i);
            if i == 4 {
                assert_eq!(r.finish_reason, FinishReason::Error);
                assert!(r.error.as_deref().unwrap().contains("down"));
            } else {
                assert_eq!(r.text, format!("out{i}"));
            }
        }
        assert!(batch_generate(&gen, &[], 3).is_empty());
        // sequential equivalence
        let seq: Vec<String> = reqs
            .iter()
            .map(|r| gen.generate(r).map(|g| g.text).unwrap_or_default())
            .collect();
        let par: Vec<String> = out.iter().map(|r| r.text.clone()).collect();
        assert_eq!(seq, par);
    }

    #[test]
    fn backoff_grows_and_caps() {
        let p = RetryPolicy {
            max_attempts: 5,
            initial_backoff_ms: 100,
            max_backoff_ms: 350,
            multiplier: 2.0,
        };
        assert_eq!(p.backoff(1), Duration::from_millis(100));
        assert_eq!(p.backoff(2), Duration::from_millis(200));
        assert_eq!(p.backoff(3), Duration::from_millis(350));
    }

    #[test]
    fn json_paths() {
        let v = json!({"choices": [{"message": {"content": "hi"}}]});
        assert_eq!(json_path(&v, "choices.0.message.content"), Some(&json!("hi")));
        assert_eq!(json_path(&v, "choices.1.message"), None);
        assert_eq!(json_path(&v, "choices.x"), None);
    }

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(tokenize("gut microbiome"), vec!["gut", "microbiome"]);
        assert_eq!(tokenize("branched-chain (BCAAs)."), vec!["branched", "-", "chain", "(", "BCAAs", ")", "."]);
        assert!(tokenize("  \n ").is_empty());
    }

    #[test]
    fn offline_embeddings() {
        let e = HashedNgramEmbedder::default();
        let a = e.embed_tokens("gut microbiome").unwrap();
        assert_eq!(a.tokens.len(), 2);
        assert_eq!(a.dim(), 64);
        assert_eq!(a, e.embed_tokens("gut microbiome").unwrap());

        let twice = e.embed_tokens("gut and gut").unwrap();
        assert_eq!(twice.vectors[0], twice.vectors[2]);

        let single = e.embed_tokens("butyrate").unwrap();
        assert_eq!(e.embed_text("butyrate").unwrap(), single.vectors[0]);

        let ab = e.embed_tokens("a b").unwrap();
        let mean: Vec<f64> = ab.vectors[0].iter().zip(&ab.vectors[1]).map(|(x, y)| (x + y) / 2.0).collect();
        assert_eq!(e.embed_text("a b").unwrap(), mean);

        assert_eq!(e.embed_text(""), Err(BackendError::EmptyInput));
        assert!(HashedNgramEmbedder::new(0).is_err());
    }

    proptest! {
        #[test]
        fn offline_vectors_have_positive_norm(s in "\\PC{1,60}") {
            let e = HashedNgramEmbedder::default();
            if let Ok(emb) = e.embed_tokens(&s) {
                for v in &emb.vectors {
                    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    prop_assert!(norm > 0.0);
                    prop_assert!(v.iter().all(|x| x.is_finite()));
                }
            } else {
                prop_assert!(s.trim().is_empty());
            }
        }
    }
}
