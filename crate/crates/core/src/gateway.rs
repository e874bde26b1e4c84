//! Client for OpenAI-compatible chat-completion servers hosting a
//! vision-language model.
//!
//! Requests carry images as base64 `data:` URIs and ask for per-token top-N
//! log-probabilities. Responses are cached on disk under a key that hashes the
//! decoding settings, the full conversation text and the *content* of every
//! image, so the same tile reached through two paths shares cache entries.

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use base64::Engine as _;
use log::{debug, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datamodel::write_atomic;
use crate::prompts::{Conversation, ImagePart, ImageSource, MessagePart, Role};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("logprobs were requested but the server returned none")]
    LogprobsMissing,
    #[error("response has no generated token positions")]
    NoTokenPositions,
    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
}

fn default_temperature() -> f64 {
    0.0
}
fn default_max_output_tokens() -> u32 {
    32
}
fn default_reasoning_max_tokens() -> u32 {
    512
}
fn default_top_n() -> u32 {
    20
}
fn default_in_flight() -> usize {
    4
}
fn default_timeout_secs() -> u64 {
    120
}
fn default_attempts() -> u32 {
    4
}
fn default_backoff_ms() -> u64 {
    500
}

/// Connection and decoding settings for one inference server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    /// Full chat-completions URL, e.g. `http://localhost:8000/v1/chat/completions`.
    pub endpoint_url: String,
    pub model_id: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub auth_env_var: Option<String>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
    /// Output budget for the free-form reasoning turn.
    #[serde(default = "default_reasoning_max_tokens")]
    pub reasoning_max_tokens: u32,
    #[serde(default = "default_top_n")]
    pub logprob_top_n: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_attempts")]
    pub retry_max_attempts: u32,
    #[serde(default = "default_backoff_ms")]
    pub retry_base_backoff_ms: u64,
    /// Downscale images whose longer side exceeds this many pixels. Off by default.
    #[serde(default)]
    pub max_image_dim: Option<u32>,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

impl BackendConfig {
    pub fn new(endpoint_url: impl Into<String>, model_id: impl Into<String>) -> Self {
        BackendConfig {
            endpoint_url: endpoint_url.into(),
            model_id: model_id.into(),
            auth_env_var: None,
            temperature: default_temperature(),
            max_output_tokens: default_max_output_tokens(),
            reasoning_max_tokens: default_reasoning_max_tokens(),
            logprob_top_n: default_top_n(),
            max_in_flight: default_in_flight(),
            timeout_secs: default_timeout_secs(),
            retry_max_attempts: default_attempts(),
            retry_base_backoff_ms: default_backoff_ms(),
            max_image_dim: None,
            cache_dir: None,
        }
    }

    /// `needs_logprobs` is true for strategies that read token probabilities.
    pub fn validate(&self, needs_logprobs: bool) -> Result<(), GatewayError> {
        let bad = |m: String| Err(GatewayError::Config(m));
        if !(self.endpoint_url.starts_with("http://") || self.endpoint_url.starts_with("https://")) {
            return bad(format!("endpoint_url '{}' is not an http(s) URL", self.endpoint_url));
        }
        if self.model_id.is_empty() {
            return bad("model_id is empty".into());
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return bad(format!("temperature {} < 0", self.temperature));
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be at least 1".into());
        }
        if self.retry_max_attempts == 0 {
            return bad("retry_max_attempts must be at least 1".into());
        }
        if needs_logprobs && self.logprob_top_n < 5 {
            return bad(format!(
                "logprob_top_n {} cannot cover the five Likert tokens",
                self.logprob_top_n
            ));
        }
        if let Some(var) = &self.auth_env_var {
            if std::env::var(var).is_err() {
                return bad(format!("auth environment variable {var} is not set"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlmResponse {
    pub text: String,
    /// Top-N alternatives for each generated position.
    pub token_logprobs: Vec<Vec<TokenLogprob>>,
    pub latency_ms: u64,
    #[serde(skip)]
    pub from_cache: bool,
}

/// Probability mass per canonical answer label at one generated position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution {
    pub probs: BTreeMap<String, f64>,
    pub position: usize,
}

impl TokenDistribution {
    pub fn get(&self, label: &str) -> f64 {
        self.probs.get(label).copied().unwrap_or(0.0)
    }
}

/// Sums `exp(logprob)` over the first position's alternatives whose surface,
/// with leading whitespace stripped, equals a label case-insensitively.
/// Labels never observed get probability 0.
pub fn extract_token_probs(
    resp: &VlmResponse,
    target_labels: &[&str],
) -> Result<TokenDistribution, GatewayError> {
    let position = 0;
    let alternatives = resp
        .token_logprobs
        .get(position)
        .ok_or(GatewayError::NoTokenPositions)?;
    let mut probs: BTreeMap<String, f64> =
        target_labels.iter().map(|l| (l.to_string(), 0.0)).collect();
    for alt in alternatives {
        let surface = alt.token.trim_start().to_lowercase();
        if let Some(label) = target_labels.iter().find(|l| l.to_lowercase() == surface) {
            *probs.get_mut(*label).expect("seeded above") += alt.logprob.min(0.0).exp();
        }
    }
    for p in probs.values_mut() {
        *p = p.clamp(0.0, 1.0);
    }
    Ok(TokenDistribution { probs, position })
}

/// One model call.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub conversation: Conversation,
    pub want_logprobs: bool,
    /// Overrides the configured output budget.
    pub max_output_tokens: Option<u32>,
}

impl CompletionRequest {
    pub fn new(conversation: impl Into<Conversation>, want_logprobs: bool) -> Self {
        CompletionRequest {
            conversation: conversation.into(),
            want_logprobs,
            max_output_tokens: None,
        }
    }
}

/// Anything that can answer a chat request like a VLM server.
pub trait VlmBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<VlmResponse, GatewayError>;

    /// Output budget for a reasoning turn.
    fn reasoning_budget(&self) -> u32 {
        default_reasoning_max_tokens()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct GatewayStats {
    pub http_requests: u64,
    pub retries: u64,
    pub cache_hits: u64,
    pub failures: u64,
}

struct InFlight {
    count: Mutex<usize>,
    cond: Condvar,
    limit: usize,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.count.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.limit {
            n = self.cond.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.count.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.0.cond.notify_one();
    }
}

/// On-disk response cache, one JSON file per key.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(ResponseCache { dir })
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    /// Corrupt entries are removed and reported as misses.
    pub fn get(&self, key: &str) -> Option<VlmResponse> {
        let path = self.path(key);
        let bytes = fs::read(&path).ok()?;
        match serde_json::from_slice::<VlmResponse>(&bytes) {
            Ok(mut resp) => {
                resp.from_cache = true;
                Some(resp)
            }
            Err(e) => {
                warn!("discarding corrupt cache entry {}: {e}", path.display());
                let _ = fs::remove_file(&path);
                None
            }
        }
    }

    pub fn put(&self, key: &str, resp: &VlmResponse) -> std::io::Result<()> {
        let bytes = serde_json::to_vec(resp)?;
        write_atomic(self.path(key), &bytes)
    }
}

/// Image bytes ready for transmission plus their content hash.
struct LoadedImage {
    data_uri: String,
    content_hash: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the image payload; files are hashed by content, URIs by text.
pub fn image_content_hash(part: &ImagePart) -> Result<String, GatewayError> {
    match &part.source {
        ImageSource::File(path) => Ok(sha256_hex(&read_image(path)?)),
        ImageSource::Url(url) => Ok(sha256_hex(url.as_bytes())),
    }
}

fn read_image(path: &Path) -> Result<Vec<u8>, GatewayError> {
    fs::read(path).map_err(|e| GatewayError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn load_image(part: &ImagePart, max_dim: Option<u32>) -> Result<LoadedImage, GatewayError> {
    match &part.source {
        ImageSource::Url(url) => Ok(LoadedImage {
            data_uri: url.clone(),
            content_hash: sha256_hex(url.as_bytes()),
        }),
        ImageSource::File(path) => {
            let bytes = read_image(path)?;
            let content_hash = sha256_hex(&bytes);
            let (media_type, payload) = match max_dim {
                Some(limit) => downscale(path, &bytes, limit, &part.media_type)?,
                None => (part.media_type.clone(), bytes),
            };
            let b64 = base64::engine::general_purpose::STANDARD.encode(&payload);
            Ok(LoadedImage {
                data_uri: format!("data:{media_type};base64,{b64}"),
                content_hash,
            })
        }
    }
}

fn downscale(
    path: &Path,
    bytes: &[u8],
    limit: u32,
    media_type: &str,
) -> Result<(String, Vec<u8>), GatewayError> {
    let img_err = |e: image::ImageError| GatewayError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let img = image::load_from_memory(bytes).map_err(img_err)?;
    if img.width().max(img.height()) <= limit {
        return Ok((media_type.to_string(), bytes.to_vec()));
    }
    let resized = img.resize(limit, limit, image::imageops::FilterType::Lanczos3);
    let mut out = Cursor::new(Vec::new());
    resized
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(img_err)?;
    Ok(("image/png".to_string(), out.into_inner()))
}

/// HTTP-backed [`VlmBackend`] with retries, an in-flight limit and an
/// optional response cache.
pub struct HttpGateway {
    cfg: BackendConfig,
    agent: ureq::Agent,
    token: Option<String>,
    in_flight: InFlight,
    cache: Option<ResponseCache>,
    http_requests: AtomicU64,
    retries: AtomicU64,
    cache_hits: AtomicU64,
    failures: AtomicU64,
}

impl HttpGateway {
    pub fn new(cfg: BackendConfig, needs_logprobs: bool) -> Result<Self, GatewayError> {
        cfg.validate(needs_logprobs)?;
        let token = match &cfg.auth_env_var {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| GatewayError::Config(format!("{var} is not set")))?,
            ),
            None => None,
        };
        let cache = match &cfg.cache_dir {
            Some(dir) => Some(ResponseCache::open(dir).map_err(|e| {
                GatewayError::Config(format!("cache dir {}: {e}", dir.display()))
            })?),
            None => None,
        };
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build();
        Ok(HttpGateway {
            in_flight: InFlight {
                count: Mutex::new(0),
                cond: Condvar::new(),
                limit: cfg.max_in_flight,
            },
            cfg,
            agent,
            token,
            cache,
            http_requests: AtomicU64::new(0),
            retries: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
            failures: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            http_requests: self.http_requests.load(Ordering::Relaxed),
            retries: self.retries.load(Ordering::Relaxed),
            cache_hits: self.cache_hits.load(Ordering::Relaxed),
            failures: self.failures.load(Ordering::Relaxed),
        }
    }

    /// Collision-resistant key over every input that can change the reply.
    pub fn cache_key(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        let mut turns = Vec::with_capacity(request.conversation.turns.len());
        for turn in &request.conversation.turns {
            let mut parts = Vec::with_capacity(turn.message.parts.len());
            for part in &turn.message.parts {
                parts.push(match part {
                    MessagePart::Text(t) => json!({ "text": t }),
                    MessagePart::Image(img) => json!({
                        "image": image_content_hash(img)?,
                        "media_type": img.media_type,
                    }),
                });
            }
            turns.push(json!({ "role": turn.role, "parts": parts }));
        }
        let material = json!({
            "model_id": self.cfg.model_id,
            "temperature": self.cfg.temperature.to_bits(),
            "max_output_tokens": self.effective_max_tokens(request),
            "logprob_top_n": self.cfg.logprob_top_n,
            "want_logprobs": request.want_logprobs,
            "max_image_dim": self.cfg.max_image_dim,
            "turns": turns,
        });
        Ok(sha256_hex(material.to_string().as_bytes()))
    }

    fn effective_max_tokens(&self, request: &CompletionRequest) -> u32 {
        request.max_output_tokens.unwrap_or(self.cfg.max_output_tokens)
    }

    fn build_body(&self, request: &CompletionRequest) -> Result<Value, GatewayError> {
        let mut messages = Vec::with_capacity(request.conversation.turns.len());
        for turn in &request.conversation.turns {
            let role = match turn.role {
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            let content = if turn.message.images().next().is_none() {
                Value::String(turn.message.text_content())
            } else {
                let mut parts = Vec::with_capacity(turn.message.parts.len());
                for part in &turn.message.parts {
                    parts.push(match part {
                        MessagePart::Text(t) => json!({ "type": "text", "text": t }),
                        MessagePart::Image(img) => {
                            let loaded = load_image(img, self.cfg.max_image_dim)?;
                            debug!("attaching image {}", loaded.content_hash);
                            json!({ "type": "image_url", "image_url": { "url": loaded.data_uri } })
                        }
                    });
                }
                Value::Array(parts)
            };
            messages.push(json!({ "role": role, "content": content }));
        }
        let mut body = json!({
            "model": self.cfg.model_id,
            "messages": messages,
            "temperature": self.cfg.temperature,
            "max_tokens": self.effective_max_tokens(request),
        });
        if request.want_logprobs {
            body["logprobs"] = Value::Bool(true);
            body["top_logprobs"] = json!(self.cfg.logprob_top_n);
        }
        Ok(body)
    }

    fn send_with_retries(&self, body: &str) -> Result<String, GatewayError> {
        let max = self.cfg.retry_max_attempts;
        let mut attempt = 0;
        loop {
            attempt += 1;
            let mut req = self
                .agent
                .post(&self.cfg.endpoint_url)
                .set("Content-Type", "application/json");
            if let Some(token) = &self.token {
                req = req.set("Authorization", &format!("Bearer {token}"));
            }
            self.http_requests.fetch_add(1, Ordering::Relaxed);
            let retryable_msg = match req.send_string(body) {
                Ok(resp) => {
                    return resp
                        .into_string()
                        .map_err(|e| GatewayError::Malformed(format!("reading body: {e}")))
                }
                Err(ureq::Error::Status(status, resp)) => {
                    let text = resp.into_string().unwrap_or_default();
                    if !(status == 429 || status >= 500) {
                        return Err(GatewayError::Http { status, body: text });
                    }
                    if attempt >= max {
                        return Err(GatewayError::Http { status, body: text });
                    }
                    format!("HTTP {status}")
                }
                Err(ureq::Error::Transport(t)) => {
                    if attempt >= max {
                        return Err(GatewayError::Transport {
                            attempts: attempt,
                            message: t.to_string(),
                        });
                    }
                    t.to_string()
                }
            };
            self.retries.fetch_add(1, Ordering::Relaxed);
            let backoff = self.cfg.retry_base_backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
            warn!("attempt {attempt}/{max} failed ({retryable_msg}); retrying in {backoff} ms");
            std::thread::sleep(Duration::from_millis(backoff));
        }
    }

    /// Uncached request/response cycle.
    pub fn complete_uncached(&self, request: &CompletionRequest) -> Result<VlmResponse, GatewayError> {
        let body = self.build_body(request)?.to_string();
        let started = Instant::now();
        let raw = {
            let _permit = self.in_flight.acquire();
            self.send_with_retries(&body)
        };
        let raw = raw.inspect_err(|_| {
            self.failures.fetch_add(1, Ordering::Relaxed);
        })?;
        let mut resp = parse_chat_response(&raw, request.want_logprobs)?;
        resp.latency_ms = started.elapsed().as_millis() as u64;
        Ok(resp)
    }

    /// Serves from the cache when possible, otherwise calls the server and
    /// stores the reply.
    pub fn cached_complete(&self, request: &CompletionRequest) -> Result<VlmResponse, GatewayError> {
        let Some(cache) = &self.cache else {
            return self.complete_uncached(request);
        };
        let key = self.cache_key(request)?;
        if let Some(hit) = cache.get(&key) {
            self.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(hit);
        }
        let resp = self.complete_uncached(request)?;
        if let Err(e) = cache.put(&key, &resp) {
            warn!("could not store cache entry {key}: {e}");
        }
        Ok(resp)
    }
}

impl VlmBackend for HttpGateway {
    fn complete(&self, request: &CompletionRequest) -> Result<VlmResponse, GatewayError> {
        self.cached_complete(request)
    }

    fn reasoning_budget(&self) -> u32 {
        self.cfg.reasoning_max_tokens
    }
}

/// Parses an OpenAI-style chat completion body.
pub fn parse_chat_response(raw: &str, want_logprobs: bool) -> Result<VlmResponse, GatewayError> {
    let v: Value = serde_json::from_str(raw).map_err(|e| GatewayError::Malformed(e.to_string()))?;
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| GatewayError::Malformed("missing choices[0]".into()))?;
    let text = match choice.pointer("/message/content") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Null) | None => String::new(),
        Some(other) => {
            return Err(GatewayError::Malformed(format!(
                "message.content is not a string: {other}"
            )))
        }
    };
    let mut token_logprobs = Vec::new();
    if let Some(Value::Array(positions)) = choice.pointer("/logprobs/content") {
        for pos in positions {
            let mut alts = Vec::new();
            if let Some(Value::Array(top)) = pos.get("top_logprobs") {
                for alt in top {
                    alts.push(parse_alternative(alt)?);
                }
            }
            if alts.is_empty() {
                // Servers that ignore top_logprobs still report the sampled token.
                alts.push(parse_alternative(pos)?);
            }
            token_logprobs.push(alts);
        }
    }
    if want_logprobs && token_logprobs.is_empty() {
        return Err(GatewayError::LogprobsMissing);
    }
    Ok(VlmResponse {
        text,
        token_logprobs,
        latency_ms: 0,
        from_cache: false,
    })
}

fn parse_alternative(v: &Value) -> Result<TokenLogprob, GatewayError> {
    let token = v
        .get("token")
        .and_then(Value::as_str)
        .ok_or_else(|| GatewayError::Malformed("logprob entry without token".into()))?;
    let logprob = v
        .get("logprob")
        .and_then(Value::as_f64)
        .ok_or_else(|| GatewayError::Malformed("logprob entry without logprob".into()))?;
    Ok(TokenLogprob {
        token: token.to_string(),
        logprob: logprob.min(0.0),
    })
}
