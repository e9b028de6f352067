//! The pluggable model interface.
//!
//! Every prompt in the pipeline goes through the [`Backend`] trait: a wire
//! client speaking the OpenAI-compatible chat-completions shape for real
//! models, and a deterministic scripted [`MockBackend`] used by all tests.
//! Backends are registered by name in a [`BackendRegistry`] and selected at
//! runtime.
//!
//! Decoding is always greedy (temperature 0) so runs are reproducible, and
//! every request/response pair can be logged to a JSON-lines transcript.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};
use thiserror::Error;

/// Sampling temperature used for every request.
pub const TEMPERATURE: f64 = 0.0;

/// Default per-request timeout.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

/// Default transport retry count.
pub const DEFAULT_RETRIES: u32 = 3;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("mock script mismatch at entry {index}: {message}")]
    ScriptMismatch { index: usize, message: String },
    #[error("mock script exhausted after {0} entries")]
    ScriptExhausted(usize),
    #[error("unknown backend '{0}'")]
    UnknownBackend(String),
    #[error("backend configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Requests and responses
// ---------------------------------------------------------------------------

/// A PNG-encoded image attachment.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePart {
    pub png: Vec<u8>,
    pub width: u32,
    pub height: u32,
}

impl ImagePart {
    /// Encode an RGB image as PNG. No resampling happens here; any resizing
    /// is the caller's decision.
    pub fn from_rgb(img: &RgbImage) -> Result<Self, BackendError> {
        let mut png = Vec::new();
        image::write_buffer_with_format(
            &mut std::io::Cursor::new(&mut png),
            img.as_raw(),
            img.width(),
            img.height(),
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|e| BackendError::InvalidRequest(format!("PNG encoding failed: {e}")))?;
        Ok(Self {
            png,
            width: img.width(),
            height: img.height(),
        })
    }

    /// FNV-1a fingerprint of the encoded bytes, for transcripts.
    pub fn fingerprint(&self) -> u64 {
        let mut hash = 0xcbf29ce484222325u64;
        for &b in &self.png {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        hash
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Part {
    Text(String),
    Image(ImagePart),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    User,
    Assistant,
}

impl Role {
    fn as_str(&self) -> &'static str {
        match self {
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Turn {
    pub role: Role,
    pub parts: Vec<Part>,
}

/// Deterministic decoding settings. The temperature is private and can only
/// ever be 0, so no request path can produce sampled output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoding {
    temperature: f64,
    pub max_output_tokens: u32,
}

impl Decoding {
    pub fn new(temperature: f64, max_output_tokens: u32) -> Result<Self, BackendError> {
        if temperature != TEMPERATURE {
            return Err(BackendError::InvalidRequest(format!(
                "temperature must be {TEMPERATURE} for reproducible decoding, got {temperature}"
            )));
        }
        Ok(Self {
            temperature,
            max_output_tokens,
        })
    }

    pub fn greedy(max_output_tokens: u32) -> Self {
        Self {
            temperature: TEMPERATURE,
            max_output_tokens,
        }
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }
}

/// One chat-style completion request: system text plus interleaved
/// text-and-image turns.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendRequest {
    /// Pipeline step tag, e.g. `"step2:person 1"`; used by mock scripts and
    /// transcripts.
    pub tag: String,
    pub system_text: String,
    pub turns: Vec<Turn>,
    pub decoding: Decoding,
}

impl BackendRequest {
    pub fn new(
        tag: impl Into<String>,
        system_text: impl Into<String>,
        turns: Vec<Turn>,
        decoding: Decoding,
    ) -> Result<Self, BackendError> {
        if !turns.iter().any(|t| t.role == Role::User) {
            return Err(BackendError::InvalidRequest(
                "request needs at least one user turn".into(),
            ));
        }
        Ok(Self {
            tag: tag.into(),
            system_text: system_text.into(),
            turns,
            decoding,
        })
    }

    /// Single user turn of text, optionally preceded by one image.
    pub fn user(
        tag: impl Into<String>,
        text: impl Into<String>,
        image: Option<ImagePart>,
        max_output_tokens: u32,
    ) -> Self {
        let mut parts = Vec::new();
        if let Some(img) = image {
            parts.push(Part::Image(img));
        }
        parts.push(Part::Text(text.into()));
        Self {
            tag: tag.into(),
            system_text: String::new(),
            turns: vec![Turn {
                role: Role::User,
                parts,
            }],
            decoding: Decoding::greedy(max_output_tokens),
        }
    }

    /// All text content concatenated, for matching and transcripts.
    pub fn text_content(&self) -> String {
        let mut out = String::new();
        if !self.system_text.is_empty() {
            out.push_str(&self.system_text);
            out.push('\n');
        }
        for turn in &self.turns {
            for part in &turn.parts {
                if let Part::Text(t) = part {
                    out.push_str(t);
                    out.push('\n');
                }
            }
        }
        out
    }

    pub fn images(&self) -> impl Iterator<Item = &ImagePart> {
        self.turns.iter().flat_map(|t| {
            t.parts.iter().filter_map(|p| match p {
                Part::Image(img) => Some(img),
                Part::Text(_) => None,
            })
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendResponse {
    pub text: String,
    pub latency: Duration,
    pub token_usage: Option<u64>,
}

/// A chat-completions style model endpoint.
pub trait Backend: Send + Sync {
    fn name(&self) -> &'static str;
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError>;
}

// ---------------------------------------------------------------------------
// Transcript
// ---------------------------------------------------------------------------

/// Shared JSON-lines transcript writer: one request/response pair per line.
///
/// Image parts are summarized by size and fingerprint so transcripts stay
/// compact yet byte-identical for identical runs.
#[derive(Clone)]
pub struct Transcript {
    inner: Arc<Mutex<BufWriter<File>>>,
    path: PathBuf,
}

impl Transcript {
    pub fn create(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path)?;
        Ok(Self {
            inner: Arc::new(Mutex::new(BufWriter::new(file))),
            path,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn log(&self, request: &BackendRequest, response: &Result<BackendResponse, BackendError>) {
        let turns: Vec<serde_json::Value> = request
            .turns
            .iter()
            .map(|t| {
                let parts: Vec<serde_json::Value> = t
                    .parts
                    .iter()
                    .map(|p| match p {
                        Part::Text(text) => serde_json::json!({ "text": text }),
                        Part::Image(img) => serde_json::json!({
                            "image": {
                                "width": img.width,
                                "height": img.height,
                                "bytes": img.png.len(),
                                "fnv64": format!("{:016x}", img.fingerprint()),
                            }
                        }),
                    })
                    .collect();
                serde_json::json!({ "role": t.role.as_str(), "parts": parts })
            })
            .collect();
        let response_json = match response {
            Ok(r) => serde_json::json!({
                "text": r.text,
                "latency_s": r.latency.as_secs_f64(),
                "token_usage": r.token_usage,
            }),
            Err(e) => serde_json::json!({ "error": e.to_string() }),
        };
        let line = serde_json::json!({
            "tag": request.tag,
            "request": {
                "system": request.system_text,
                "turns": turns,
                "max_output_tokens": request.decoding.max_output_tokens,
            },
            "response": response_json,
        });
        let mut writer = self.inner.lock().expect("transcript lock");
        // Serialization of a Value cannot fail; IO errors only surface on flush.
        let _ = writeln!(writer, "{line}");
        let _ = writer.flush();
    }
}

// ---------------------------------------------------------------------------
// Mock backend
// ---------------------------------------------------------------------------

/// How a script entry decides whether it matches a request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    /// Matches when the request's text content contains this substring.
    Substring(String),
    /// Matches when the request tag equals this value or starts with it
    /// followed by `':'`.
    Tag(String),
}

impl Matcher {
    fn matches(&self, request: &BackendRequest) -> bool {
        match self {
            Matcher::Substring(s) => request.text_content().contains(s.as_str()),
            Matcher::Tag(t) => {
                request.tag == *t || request.tag.starts_with(&format!("{t}:"))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub matcher: Matcher,
    pub response: String,
}

impl ScriptEntry {
    pub fn tag(tag: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            matcher: Matcher::Tag(tag.into()),
            response: response.into(),
        }
    }

    pub fn substring(needle: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            matcher: Matcher::Substring(needle.into()),
            response: response.into(),
        }
    }
}

/// Deterministic scripted backend: entries are consumed strictly in order,
/// each request must match the next entry, and latency is always zero.
pub struct MockBackend {
    script: Vec<ScriptEntry>,
    cursor: Mutex<usize>,
    recorded: Mutex<Vec<BackendRequest>>,
    transcript: Option<Transcript>,
}

impl MockBackend {
    pub fn new(script: Vec<ScriptEntry>) -> Self {
        Self {
            script,
            cursor: Mutex::new(0),
            recorded: Mutex::new(Vec::new()),
            transcript: None,
        }
    }

    pub fn with_transcript(mut self, transcript: Transcript) -> Self {
        self.transcript = Some(transcript);
        self
    }

    /// Load a script from a JSON array of `{matcher, response}` entries.
    pub fn from_script_file(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let data = std::fs::read_to_string(path)?;
        let script: Vec<ScriptEntry> = serde_json::from_str(&data)
            .map_err(|e| BackendError::Config(format!("invalid mock script: {e}")))?;
        Ok(Self::new(script))
    }

    /// Requests seen so far, in order.
    pub fn recorded_requests(&self) -> Vec<BackendRequest> {
        self.recorded.lock().expect("mock lock").clone()
    }

    pub fn entries_consumed(&self) -> usize {
        *self.cursor.lock().expect("mock lock")
    }
}

impl Backend for MockBackend {
    fn name(&self) -> &'static str {
        "mock"
    }

    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        // Script consumption is serialized so transcript order is well defined.
        let mut cursor = self.cursor.lock().expect("mock lock");
        self.recorded
            .lock()
            .expect("mock lock")
            .push(request.clone());
        let index = *cursor;
        let result = match self.script.get(index) {
            None => Err(BackendError::ScriptExhausted(self.script.len())),
            Some(entry) => {
                if entry.matcher.matches(request) {
                    *cursor += 1;
                    Ok(BackendResponse {
                        text: entry.response.clone(),
                        latency: Duration::ZERO,
                        token_usage: None,
                    })
                } else {
                    Err(BackendError::ScriptMismatch {
                        index,
                        message: format!(
                            "request tagged '{}' does not match {:?}",
                            request.tag, entry.matcher
                        ),
                    })
                }
            }
        };
        if let Some(t) = &self.transcript {
            t.log(request, &result);
        }
        result
    }
}

// ---------------------------------------------------------------------------
// HTTP backend
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct HttpConfig {
    /// Base URL of the chat-completions API, without the trailing route.
    pub base_url: String,
    pub api_key: String,
    pub model: String,
    pub timeout: Duration,
    pub max_retries: u32,
}

/// Client for an OpenAI-compatible `/chat/completions` endpoint. Images are
/// sent as base64 data URLs; decoding is always greedy.
pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
    transcript: Option<Transcript>,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(config.timeout).build();
        Self {
            config,
            agent,
            transcript: None,
        }
    }

    pub fn with_transcript(mut self, transcript: Transcript) -> Self {
        self.transcript = Some(transcript);
        self
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn request_body(&self, request: &BackendRequest) -> serde_json::Value {
        let mut messages = Vec::new();
        if !request.system_text.is_empty() {
            messages.push(serde_json::json!({
                "role": "system",
                "content": request.system_text,
            }));
        }
        for turn in &request.turns {
            let content: Vec<serde_json::Value> = turn
                .parts
                .iter()
                .map(|p| match p {
                    Part::Text(t) => serde_json::json!({ "type": "text", "text": t }),
                    Part::Image(img) => serde_json::json!({
                        "type": "image_url",
                        "image_url": {
                            "url": format!("data:image/png;base64,{}", BASE64.encode(&img.png)),
                        },
                    }),
                })
                .collect();
            messages.push(serde_json::json!({
                "role": turn.role.as_str(),
                "content": content,
            }));
        }
        serde_json::json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": request.decoding.temperature(),
            "max_tokens": request.decoding.max_output_tokens,
        })
    }

    fn complete_inner(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let body = self.request_body(request);
        let started = Instant::now();
        let mut last_error = String::new();
        let attempts = self.config.max_retries + 1;
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(500 << attempt.min(6)));
            }
            let result = self
                .agent
                .post(&self.endpoint())
                .set("Authorization", &format!("Bearer {}", self.config.api_key))
                .send_json(body.clone());
            match result {
                Ok(resp) => {
                    let json: serde_json::Value = resp.into_json().map_err(|e| {
                        BackendError::Protocol(format!("response is not JSON: {e}"))
                    })?;
                    let text = json["choices"][0]["message"]["content"]
                        .as_str()
                        .ok_or_else(|| {
                            BackendError::Protocol(
                                "response has no choices[0].message.content text".into(),
                            )
                        })?
                        .to_string();
                    let token_usage = json["usage"]["total_tokens"].as_u64();
                    return Ok(BackendResponse {
                        text,
                        latency: started.elapsed(),
                        token_usage,
                    });
                }
                Err(ureq::Error::Status(code, resp)) => {
                    let detail = resp.into_string().unwrap_or_default();
                    last_error = format!("HTTP {code}: {detail}");
                    // Client errors other than rate limiting will not heal.
                    if code != 429 && code < 500 {
                        return Err(BackendError::Transport {
                            attempts: attempt + 1,
                            message: last_error,
                        });
                    }
                }
                Err(ureq::Error::Transport(t)) => {
                    last_error = t.to_string();
                }
            }
        }
        Err(BackendError::Transport {
            attempts,
            message: last_error,
        })
    }
}

impl Backend for HttpBackend {
    fn name(&self) -> &'static str {
        "http"
    }

    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let result = self.complete_inner(request);
        if let Some(t) = &self.transcript {
            t.log(request, &result);
        }
        result
    }
}

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

/// Everything a backend factory might need; unused fields may stay empty.
#[derive(Debug, Clone, Default)]
pub struct BackendOptions {
    pub endpoint: Option<String>,
    pub api_key: Option<String>,
    pub model: Option<String>,
    pub script_path: Option<PathBuf>,
    pub timeout: Option<Duration>,
    pub max_retries: Option<u32>,
    pub transcript_path: Option<PathBuf>,
}

pub type BackendFactory = fn(&BackendOptions) -> Result<Arc<dyn Backend>, BackendError>;

/// Name-keyed registry of backend constructors.
pub struct BackendRegistry {
    factories: BTreeMap<String, BackendFactory>,
}

impl BackendRegistry {
    /// Registry with the built-in `http` and `mock` backends.
    pub fn builtin() -> Self {
        let mut registry = Self {
            factories: BTreeMap::new(),
        };
        registry.register("http", build_http_backend);
        registry.register("mock", build_mock_backend);
        registry
    }

    pub fn register(&mut self, name: &str, factory: BackendFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(|s| s.as_str()).collect()
    }

    pub fn create(
        &self,
        name: &str,
        options: &BackendOptions,
    ) -> Result<Arc<dyn Backend>, BackendError> {
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| BackendError::UnknownBackend(name.to_string()))?;
        factory(options)
    }
}

fn build_http_backend(options: &BackendOptions) -> Result<Arc<dyn Backend>, BackendError> {
    let base_url = options
        .endpoint
        .clone()
        .ok_or_else(|| BackendError::Config("http backend requires an endpoint URL".into()))?;
    let api_key = options
        .api_key
        .clone()
        .ok_or_else(|| BackendError::Config("http backend requires an API key".into()))?;
    let model = options
        .model
        .clone()
        .ok_or_else(|| BackendError::Config("http backend requires a model name".into()))?;
    let backend = HttpBackend::new(HttpConfig {
        base_url,
        api_key,
        model,
        timeout: options.timeout.unwrap_or(DEFAULT_TIMEOUT),
        max_retries: options.max_retries.unwrap_or(DEFAULT_RETRIES),
    });
    Ok(match &options.transcript_path {
        Some(path) => Arc::new(backend.with_transcript(Transcript::create(path)?)),
        None => Arc::new(backend),
    })
}

fn build_mock_backend(options: &BackendOptions) -> Result<Arc<dyn Backend>, BackendError> {
    let path = options
        .script_path
        .clone()
        .ok_or_else(|| BackendError::Config("mock backend requires a script path".into()))?;
    let backend = MockBackend::from_script_file(path)?;
    Ok(match &options.transcript_path {
        Some(path) => Arc::new(backend.with_transcript(Transcript::create(path)?)),
        None => Arc::new(backend),
    })
}
