//! Uniform access to chat-completion and embedding backends.
//!
//! Every model invocation in the pipeline goes through the [`ChatBackend`]
//! and [`EmbedBackend`] traits, so any stage can run against a remote
//! HTTP endpoint or a deterministic in-process mock. The scripted chat
//! backend and the feature-hash embedder make the whole pipeline testable
//! offline.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::{ApproxTokenizer, Tokenizer};

/// One chat-completion invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatCall {
    pub system_text: String,
    pub user_text: String,
    pub temperature: f64,
    pub seed: Option<u64>,
    pub max_output_tokens: u32,
}

impl ChatCall {
    /// A deterministic call (temperature 0, generous output budget).
    pub fn new(system_text: impl Into<String>, user_text: impl Into<String>) -> Self {
        let call = ChatCall {
            system_text: system_text.into(),
            user_text: user_text.into(),
            temperature: 0.0,
            seed: None,
            max_output_tokens: 4096,
        };
        debug_assert!(!call.user_text.is_empty(), "user_text must be non-empty");
        call
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_max_output_tokens(mut self, n: u32) -> Self {
        assert!(n >= 1, "max_output_tokens must be >= 1");
        self.max_output_tokens = n;
        self
    }
}

/// Reply text plus token usage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatReply {
    pub text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend error (status {status}): {message}")]
    Backend { status: u16, message: String },
    #[error("output truncated at {max_output_tokens} tokens")]
    Budget {
        max_output_tokens: u32,
        partial: ChatReply,
    },
    #[error("no fixture for prompt: {0:?}")]
    FixtureMiss(String),
    #[error("empty text")]
    EmptyText,
}

/// Chat-completion backend.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, call: &ChatCall) -> Result<ChatReply, GatewayError>;
}

/// Embedding backend producing unit-norm vectors of a fixed dimension.
pub trait EmbedBackend: Send + Sync {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, GatewayError>;
    fn dimension(&self) -> usize;
    /// Character cap applied to full-content inputs before embedding.
    fn input_cap_chars(&self) -> usize {
        8000
    }
}

/// Issue a chat call with one retry on transport failure.
pub fn complete(backend: &dyn ChatBackend, call: &ChatCall) -> Result<ChatReply, GatewayError> {
    match backend.complete(call) {
        Err(GatewayError::Transport(_)) => {
            std::thread::sleep(RETRY_BACKOFF);
            backend.complete(call)
        }
        other => other,
    }
}

const RETRY_BACKOFF: Duration = Duration::from_millis(200);

/// Embed non-empty text.
pub fn embed(backend: &dyn EmbedBackend, text: &str) -> Result<EmbeddingVector, GatewayError> {
    if text.trim().is_empty() {
        return Err(GatewayError::EmptyText);
    }
    backend.embed(text)
}

/// A unit-L2-norm vector in the relevance-scoring space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    /// Normalize `values` to unit L2 norm. Zero vectors are rejected.
    pub fn normalized(mut values: Vec<f64>) -> Option<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return None;
        }
        for v in &mut values {
            *v /= norm;
        }
        Some(EmbeddingVector { values })
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Test double resolving replies by exact `user_text` match.
///
/// An optional `"*"` fixture acts as a catch-all for prompts without an
/// exact entry; without it, unmatched prompts fail with
/// [`GatewayError::FixtureMiss`]. Replies are a pure function of
/// (fixtures, call), and the backend counts its calls so tests can assert
/// call budgets.
pub struct ScriptedBackend {
    fixtures: HashMap<String, String>,
    calls: AtomicUsize,
}

/// Catch-all fixture key.
pub const WILDCARD_FIXTURE: &str = "*";

pub fn make_scripted_backend(fixtures: HashMap<String, String>) -> ScriptedBackend {
    ScriptedBackend {
        fixtures,
        calls: AtomicUsize::new(0),
    }
}

impl ScriptedBackend {
    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, call: &ChatCall) -> Result<ChatReply, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let text = self
            .fixtures
            .get(&call.user_text)
            .or_else(|| self.fixtures.get(WILDCARD_FIXTURE))
            .ok_or_else(|| GatewayError::FixtureMiss(preview(&call.user_text)))?;
        let tok = ApproxTokenizer;
        let input_tokens = (tok.count(&call.system_text) + tok.count(&call.user_text)) as u64;
        let output_tokens = tok.count(text) as u64;
        if output_tokens > call.max_output_tokens as u64 {
            let partial = tok.truncate(text, call.max_output_tokens as usize).to_string();
            let partial_tokens = tok.count(&partial) as u64;
            return Err(GatewayError::Budget {
                max_output_tokens: call.max_output_tokens,
                partial: ChatReply {
                    text: partial,
                    input_tokens,
                    output_tokens: partial_tokens,
                },
            });
        }
        Ok(ChatReply {
            text: text.clone(),
            input_tokens,
            output_tokens,
        })
    }
}

fn preview(s: &str) -> String {
    const MAX: usize = 120;
    if s.chars().count() <= MAX {
        s.to_string()
    } else {
        let cut: String = s.chars().take(MAX).collect();
        format!("{cut}…")
    }
}

/// Deterministic mock embedder: a normalized feature-hash bag of words.
///
/// Tokens are lowercased alphanumeric runs; each token is FNV-1a hashed to
/// a bucket, with a second hash bit choosing the sign. Order-insensitive
/// and stable across runs and platforms.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    input_cap_chars: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 1);
        HashEmbedder {
            dim,
            input_cap_chars: 8000,
        }
    }

    pub fn with_input_cap(mut self, chars: usize) -> Self {
        self.input_cap_chars = chars;
        self
    }
}

/// FNV-1a, 64 bit. Stable, unlike the std hasher.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn hash_tokens(text: &str) -> Vec<String> {
    let mut tokens: Vec<String> = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            for lc in c.to_lowercase() {
                current.push(lc);
            }
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    if tokens.is_empty() {
        // No alphanumeric content; hash the raw trimmed text as one token.
        tokens.push(text.trim().to_string());
    }
    tokens
}

impl EmbedBackend for HashEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        if text.trim().is_empty() {
            return Err(GatewayError::EmptyText);
        }
        let mut values = vec![0.0f64; self.dim];
        for token in hash_tokens(text) {
            let h = fnv1a(token.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
            values[bucket] += sign;
        }
        EmbeddingVector::normalized(values)
            .ok_or_else(|| GatewayError::Transport("degenerate embedding".into()))
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn input_cap_chars(&self) -> usize {
        self.input_cap_chars
    }
}

// --- Remote backends (chat-completion style HTTP+JSON) ---

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub endpoint: String,
    /// Name of the env var holding the API key, e.g. `ZERODEX_PARSER_KEY`.
    pub api_key_env: String,
    pub model: String,
    pub temperature: f64,
    pub seed: Option<u64>,
    pub timeout: Duration,
}

/// Remote chat backend speaking the common chat-completion protocol:
/// request carries a messages list, the reply's first choice holds the
/// text and `usage` the token counts.
pub struct RemoteChatBackend {
    config: RemoteConfig,
    client: reqwest::blocking::Client,
}

impl RemoteChatBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        Ok(RemoteChatBackend { config, client })
    }

    fn api_key(&self) -> Result<String, GatewayError> {
        std::env::var(&self.config.api_key_env).map_err(|_| {
            GatewayError::Transport(format!("env var {} not set", self.config.api_key_env))
        })
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Deserialize)]
struct WireChoiceMessage {
    content: String,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireChoiceMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireReply {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

impl ChatBackend for RemoteChatBackend {
    fn complete(&self, call: &ChatCall) -> Result<ChatReply, GatewayError> {
        let key = self.api_key()?;
        let body = serde_json::json!({
            "model": self.config.model,
            "messages": [
                WireMessage { role: "system", content: &call.system_text },
                WireMessage { role: "user", content: &call.user_text },
            ],
            "temperature": call.temperature,
            "seed": call.seed,
            "max_tokens": call.max_output_tokens,
        });
        let resp = self
            .client
            .post(&self.config.endpoint)
            .bearer_auth(key)
            .json(&body)
            .send()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let message = resp.text().unwrap_or_default();
            return Err(GatewayError::Backend { status, message });
        }
        let wire: WireReply = resp
            .json()
            .map_err(|e| GatewayError::Backend {
                status,
                message: format!("bad reply body: {e}"),
            })?;
        let choice = wire.choices.into_iter().next().ok_or(GatewayError::Backend {
            status,
            message: "empty choices".into(),
        })?;
        let usage = wire.usage.unwrap_or(WireUsage {
            prompt_tokens: 0,
            completion_tokens: 0,
        });
        let reply = ChatReply {
            text: choice.message.content,
            input_tokens: usage.prompt_tokens,
            output_tokens: usage.completion_tokens,
        };
        let truncated = choice
            .finish_reason
            .or(choice.message.finish_reason)
            .map(|r| r == "length")
            .unwrap_or(false);
        if truncated {
            return Err(GatewayError::Budget {
                max_output_tokens: call.max_output_tokens,
                partial: reply,
            });
        }
        Ok(reply)
    }
}

/// Remote embedding backend (`{"model", "input"}` → `data[0].embedding`).
pub struct RemoteEmbedBackend {
    config: RemoteConfig,
    dim: usize,
    input_cap_chars: usize,
    client: reqwest::blocking::Client,
}

impl RemoteEmbedBackend {
    pub fn new(config: RemoteConfig, dim: usize, input_cap_chars: usize) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        Ok(RemoteEmbedBackend {
            config,
            dim,
            input_cap_chars,
            client,
        })
    }
}

#[derive(Deserialize)]
struct WireEmbeddingItem {
    embedding: Vec<f64>,
}

#[derive(Deserialize)]
struct WireEmbeddingReply {
    data: Vec<WireEmbeddingItem>,
}

impl EmbedBackend for RemoteEmbedBackend {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        if text.trim().is_empty() {
            return Err(GatewayError::EmptyText);
        }
        let key = std::env::var(&self.config.api_key_env).map_err(|_| {
            GatewayError::Transport(format!("env var {} not set", self.config.api_key_env))
        })?;
        let body = serde_json::json!({ "model": self.config.model, "input": text });
        let resp = self
            .client
            .post(&self.config.endpoint)
            .bearer_auth(key)
            .json(&body)
            .send()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let message = resp.text().unwrap_or_default();
            return Err(GatewayError::Backend { status, message });
        }
        let wire: WireEmbeddingReply = resp.json().map_err(|e| GatewayError::Backend {
            status,
            message: format!("bad reply body: {e}"),
        })?;
        let item = wire.data.into_iter().next().ok_or(GatewayError::Backend {
            status,
            message: "empty embedding data".into(),
        })?;
        EmbeddingVector::normalized(item.embedding)
            .ok_or_else(|| GatewayError::Transport("zero-norm embedding from backend".into()))
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn input_cap_chars(&self) -> usize {
        self.input_cap_chars
    }
}
