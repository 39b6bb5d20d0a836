//! Completion backends, decoding configuration and response post-processing.
//!
//! Decoding parameters are forwarded to the backend as-is; the engine never
//! samples tokens itself.

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::prompt_builder::{RenderedPrompt, USER};

fn default_top_k() -> u32 {
    20
}
fn default_min_length() -> u32 {
    10
}
fn default_beam_size() -> u32 {
    5
}
fn default_ngram_block() -> u32 {
    5
}
fn default_max_new_tokens() -> u32 {
    64
}

/// Decoding options sent with every completion request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodingConfig {
    #[serde(default = "default_top_k")]
    pub top_k: u32,
    /// Minimum generated length, in the backend's token units.
    #[serde(default = "default_min_length")]
    pub min_length: u32,
    #[serde(default = "default_beam_size")]
    pub beam_size: u32,
    /// Size of n-grams blocked from repeating during beam search.
    #[serde(default = "default_ngram_block")]
    pub ngram_block: u32,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: u32,
    /// Appended after the prompt's own stop sequences.
    #[serde(default)]
    pub stop_sequences: Vec<String>,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        DecodingConfig {
            top_k: default_top_k(),
            min_length: default_min_length(),
            beam_size: default_beam_size(),
            ngram_block: default_ngram_block(),
            max_new_tokens: default_max_new_tokens(),
            stop_sequences: Vec::new(),
        }
    }
}

impl DecodingConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("top_k", self.top_k),
            ("beam_size", self.beam_size),
            ("max_new_tokens", self.max_new_tokens),
        ] {
            if value == 0 {
                return Err(Error::InvalidInput(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Wire body of `POST {endpoint}/complete`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub top_k: u32,
    pub min_length: u32,
    pub beam_size: u32,
    pub ngram_block: u32,
    pub max_new_tokens: u32,
    pub stop: Vec<String>,
}

impl CompletionRequest {
    pub fn new(prompt: &RenderedPrompt, config: &DecodingConfig) -> Self {
        let mut stop = prompt.stop_sequences.clone();
        for s in &config.stop_sequences {
            if !stop.contains(s) {
                stop.push(s.clone());
            }
        }
        CompletionRequest {
            prompt: prompt.text.clone(),
            top_k: config.top_k,
            min_length: config.min_length,
            beam_size: config.beam_size,
            ngram_block: config.ngram_block,
            max_new_tokens: config.max_new_tokens,
            stop,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedResponse {
    pub text: String,
    pub raw_text: String,
    pub prompt_chars: usize,
    pub backend_latency_ms: u64,
}

pub trait CompletionBackend: Send + Sync {
    /// Returns the raw continuation for `request.prompt`.
    fn complete_raw(&self, request: &CompletionRequest) -> Result<String>;
}

/// Short stable hash of a prompt, quoted in errors for reproduction.
pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(&Sha256::digest(prompt.as_bytes())[..6])
}

/// Trims leading whitespace, cuts at the earliest stop sequence, trims
/// trailing whitespace.
pub fn postprocess(raw: &str, stop_sequences: &[String]) -> String {
    let text = raw.trim_start();
    let cut = stop_sequences
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    text[..cut].trim_end().to_string()
}

/// Sends `prompt` to `backend` and post-processes the continuation.
pub fn complete(
    prompt: &RenderedPrompt,
    config: &DecodingConfig,
    backend: &dyn CompletionBackend,
) -> Result<GeneratedResponse> {
    config.validate()?;
    let request = CompletionRequest::new(prompt, config);
    let started = Instant::now();
    let raw_text = backend.complete_raw(&request).map_err(|e| match e {
        Error::Transport { .. } => Error::Completion {
            prompt_hash: prompt_hash(&prompt.text),
            source: Box::new(e),
        },
        other => other,
    })?;
    let backend_latency_ms = started.elapsed().as_millis() as u64;
    let text = postprocess(&raw_text, &request.stop);
    if text.is_empty() {
        return Err(Error::EmptyResponse);
    }
    Ok(GeneratedResponse {
        text,
        raw_text,
        prompt_chars: prompt.char_len(),
        backend_latency_ms,
    })
}

/// What the echo backend returns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "text")]
pub enum EchoMode {
    /// Always the same continuation.
    Fixed(String),
    /// Repeats the last line the prompt attributes to the responding speaker
    /// (or the last `- ` bullet), falling back to the last user line.
    LastCharacterLine,
}

/// Deterministic offline completion backend.
#[derive(Debug, Clone)]
pub struct EchoBackend {
    mode: EchoMode,
}

impl EchoBackend {
    pub fn fixed(text: impl Into<String>) -> Self {
        EchoBackend {
            mode: EchoMode::Fixed(text.into()),
        }
    }

    pub fn last_character_line() -> Self {
        EchoBackend {
            mode: EchoMode::LastCharacterLine,
        }
    }

    pub fn new(mode: EchoMode) -> Self {
        EchoBackend { mode }
    }
}

fn echo_last_line(prompt: &str) -> String {
    let (body, tail) = prompt.rsplit_once('\n').unwrap_or(("", prompt));
    let speaker_prefix = tail.trim_end();
    let user_prefix = format!("{USER}:");
    let strip = |line: &str, prefix: &str| {
        line.strip_prefix(prefix)
            .map(str::trim)
            .filter(|rest| !rest.is_empty())
            .map(str::to_string)
    };
    let lines: Vec<&str> = body.lines().collect();
    let from_speaker = lines
        .iter()
        .rev()
        .find_map(|l| strip(l, speaker_prefix).filter(|_| speaker_prefix != user_prefix));
    let from_bullet = || lines.iter().rev().find_map(|l| strip(l, "- "));
    let from_user = || lines.iter().rev().find_map(|l| strip(l, &user_prefix));
    let reply = from_speaker
        .or_else(from_bullet)
        .or_else(from_user)
        .unwrap_or_else(|| "...".to_string());
    format!(" {reply}\n{USER}:")
}

impl CompletionBackend for EchoBackend {
    fn complete_raw(&self, request: &CompletionRequest) -> Result<String> {
        Ok(match &self.mode {
            EchoMode::Fixed(text) => text.clone(),
            EchoMode::LastCharacterLine => echo_last_line(&request.prompt),
        })
    }
}

/// Wraps another backend and keeps every request it forwards.
pub struct RecordingBackend {
    inner: Arc<dyn CompletionBackend>,
    requests: Mutex<Vec<CompletionRequest>>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn CompletionBackend>) -> Self {
        RecordingBackend {
            inner,
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<CompletionRequest> {
        self.requests.lock().expect("recording lock").clone()
    }
}

impl CompletionBackend for RecordingBackend {
    fn complete_raw(&self, request: &CompletionRequest) -> Result<String> {
        self.requests
            .lock()
            .expect("recording lock")
            .push(request.clone());
        self.inner.complete_raw(request)
    }
}

#[derive(Deserialize)]
struct CompleteResponse {
    text: Option<String>,
    #[serde(default)]
    error: Option<serde_json::Value>,
    /// Parameters the server chose not to honor, if it reports them.
    #[serde(default)]
    ignored: Vec<String>,
}

/// Client for `POST {endpoint}/complete`.
pub struct RemoteCompletionBackend {
    endpoint: String,
    agent: ureq::Agent,
}

impl RemoteCompletionBackend {
    pub fn new(endpoint_url: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteCompletionBackend {
            endpoint: endpoint_url.trim_end_matches('/').to_string(),
            agent,
        }
    }
}

impl CompletionBackend for RemoteCompletionBackend {
    fn complete_raw(&self, request: &CompletionRequest) -> Result<String> {
        let url = format!("{}/complete", self.endpoint);
        let mut resp = self
            .agent
            .post(&url)
            .send_json(request)
            .map_err(|e| Error::Transport {
                endpoint: url.clone(),
                message: e.to_string(),
            })?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Transport {
                endpoint: url.clone(),
                message: e.to_string(),
            })?;
        if !(200..300).contains(&status) {
            return Err(Error::Backend {
                status: Some(status),
                message: body,
            });
        }
        let parsed: CompleteResponse = serde_json::from_str(&body)
            .map_err(|e| Error::Protocol(format!("bad /complete response: {e}")))?;
        if let Some(err) = parsed.error {
            return Err(Error::Backend {
                status: Some(status),
                message: err.to_string(),
            });
        }
        if !parsed.ignored.is_empty() {
            log::info!("completion backend ignored {:?}", parsed.ignored);
        }
        parsed
            .text
            .ok_or_else(|| Error::Protocol("/complete response has no text field".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LmKind {
    Remote,
    Echo,
}

fn default_timeout_ms() -> u64 {
    60_000
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmBackendConfig {
    pub kind: LmKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_url: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Echo only: fixed reply. Unset echoes the last character line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub echo_text: Option<String>,
}

impl LmBackendConfig {
    pub fn echo() -> Self {
        LmBackendConfig {
            kind: LmKind::Echo,
            endpoint_url: None,
            timeout_ms: default_timeout_ms(),
            echo_text: None,
        }
    }

    pub fn remote(endpoint_url: impl Into<String>) -> Self {
        LmBackendConfig {
            kind: LmKind::Remote,
            endpoint_url: Some(endpoint_url.into()),
            timeout_ms: default_timeout_ms(),
            echo_text: None,
        }
    }

    pub fn build(&self) -> Result<Arc<dyn CompletionBackend>> {
        match self.kind {
            LmKind::Remote => {
                let url = self.endpoint_url.as_deref().ok_or_else(|| {
                    Error::Config("remote LM backend requires endpoint_url".into())
                })?;
                if self.timeout_ms == 0 {
                    return Err(Error::Config("timeout_ms must be positive".into()));
                }
                Ok(Arc::new(RemoteCompletionBackend::new(
                    url,
                    Duration::from_millis(self.timeout_ms),
                )))
            }
            LmKind::Echo => Ok(Arc::new(match &self.echo_text {
                Some(text) => EchoBackend::fixed(text.clone()),
                None => EchoBackend::last_character_line(),
            })),
        }
    }
}
