//! TOML run configuration: which backend fills each role (scripted
//! fixtures or remote endpoints), embedder choice, search engine, fetcher,
//! and pipeline knobs. `RunConfig::build` turns a file into live
//! `Backends` + `PipelineConfig`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::Deserialize;
use thiserror::Error;

use crate::gateway::{
    make_scripted_backend, ChatBackend, EmbedBackend, HashEmbedder, RemoteChatBackend,
    RemoteConfig, RemoteEmbedBackend,
};
use crate::pipeline::{Backends, Clock, PipelineConfig};
use crate::search::{
    BingStyleEngine, Fetcher, GoogleStyleEngine, HttpFetcher, MockEngine, MockFetcher,
    SearchEngineClient,
};
use crate::tokenizer::ApproxTokenizer;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad TOML: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("bad fixture file {path}: {message}")]
    Fixture { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub backends: BackendsSection,
    #[serde(default)]
    pub embedder: EmbedderSection,
    pub search: SearchSection,
    #[serde(default)]
    pub fetch: FetchSection,
    #[serde(default)]
    pub pipeline: PipelineSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsSection {
    pub parser: BackendSpec,
    pub extractor: BackendSpec,
    pub generator: BackendSpec,
    #[serde(default)]
    pub judge: Option<BackendSpec>,
    /// Second extractor used only for preference-pair construction.
    #[serde(default)]
    pub alt_extractor: Option<BackendSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BackendSpec {
    /// Canned replies: a JSON object mapping user text to reply text; the
    /// key `"*"` answers anything without its own entry.
    Scripted { fixtures: PathBuf },
    Remote {
        endpoint: String,
        api_key_env: String,
        model: String,
        #[serde(default)]
        temperature: Option<f64>,
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default)]
        timeout_ms: Option<u64>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EmbedderSection {
    Hash {
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default)]
        input_cap_chars: Option<usize>,
    },
    Remote {
        endpoint: String,
        api_key_env: String,
        model: String,
        dim: usize,
        #[serde(default)]
        input_cap_chars: Option<usize>,
    },
}

fn default_dim() -> usize {
    256
}

impl Default for EmbedderSection {
    fn default() -> Self {
        EmbedderSection::Hash {
            dim: default_dim(),
            input_cap_chars: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    /// `"mock:<path.jsonl>"`, `"google"`, or `"bing"`.
    pub engine: String,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub api_key_env: Option<String>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FetchSection {
    /// `"http"` (default) or `"mock:<pages.jsonl>"`.
    #[serde(default)]
    pub fetcher: Option<String>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    pub k: Option<usize>,
    pub n_per_list: Option<usize>,
    pub fetch_timeout_ms: Option<u64>,
    pub fetch_size_cap: Option<usize>,
    pub max_segment_chars: Option<usize>,
    pub extractor_window_cap_chars: Option<usize>,
    /// RFC 3339 timestamp; when set, the run is fully deterministic.
    pub fixed_time: Option<String>,
}

/// One mock page for the canned fetcher.
#[derive(Debug, Deserialize)]
struct MockPageEntry {
    url: String,
    #[serde(default = "default_status")]
    status: u16,
    #[serde(default = "default_content_type")]
    content_type: String,
    body: String,
}

fn default_status() -> u16 {
    200
}

fn default_content_type() -> String {
    "text/html".to_string()
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let data = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(toml::from_str(&data)?)
    }

    /// Instantiate everything. Relative fixture paths resolve against
    /// `base_dir` (normally the config file's directory).
    pub fn build(&self, base_dir: &Path) -> Result<(PipelineConfig, Backends), ConfigError> {
        let parser = build_chat(&self.backends.parser, base_dir)?;
        let extractor = build_chat(&self.backends.extractor, base_dir)?;
        let generator = build_chat(&self.backends.generator, base_dir)?;
        let judge = self
            .backends
            .judge
            .as_ref()
            .map(|s| build_chat(s, base_dir))
            .transpose()?;

        let embedder: Arc<dyn EmbedBackend> = match &self.embedder {
            EmbedderSection::Hash {
                dim,
                input_cap_chars,
            } => {
                let mut e = HashEmbedder::new(*dim);
                if let Some(cap) = input_cap_chars {
                    e = e.with_input_cap(*cap);
                }
                Arc::new(e)
            }
            EmbedderSection::Remote {
                endpoint,
                api_key_env,
                model,
                dim,
                input_cap_chars,
            } => Arc::new(
                RemoteEmbedBackend::new(
                    RemoteConfig {
                        endpoint: endpoint.clone(),
                        api_key_env: api_key_env.clone(),
                        model: model.clone(),
                        temperature: 0.0,
                        seed: None,
                        timeout: Duration::from_secs(30),
                    },
                    *dim,
                    input_cap_chars.unwrap_or(8000),
                )
                .map_err(|e| ConfigError::Invalid(e.to_string()))?,
            ),
        };

        let engine: Arc<dyn SearchEngineClient> = match self.search.engine.as_str() {
            s if s.starts_with("mock:") => {
                let path = resolve(base_dir, &s["mock:".len()..]);
                Arc::new(MockEngine::from_path(&path).map_err(|e| ConfigError::Fixture {
                    path,
                    message: e.to_string(),
                })?)
            }
            "google" => Arc::new(GoogleStyleEngine::new(
                required(&self.search.endpoint, "search.endpoint")?,
                required(&self.search.api_key_env, "search.api_key_env")?,
            )),
            "bing" => Arc::new(BingStyleEngine::new(
                required(&self.search.endpoint, "search.endpoint")?,
                required(&self.search.api_key_env, "search.api_key_env")?,
            )),
            other => {
                return Err(ConfigError::Invalid(format!(
                    "unknown search engine {other:?}; use mock:<path>, google, or bing"
                )))
            }
        };

        let fetcher: Arc<dyn Fetcher> = match self.fetch.fetcher.as_deref() {
            None | Some("http") => Arc::new(HttpFetcher),
            Some(s) if s.starts_with("mock:") => {
                let path = resolve(base_dir, &s["mock:".len()..]);
                Arc::new(load_mock_fetcher(&path)?)
            }
            Some(other) => {
                return Err(ConfigError::Invalid(format!(
                    "unknown fetcher {other:?}; use http or mock:<path>"
                )))
            }
        };

        let defaults = PipelineConfig::default();
        let p = &self.pipeline;
        let clock = match &p.fixed_time {
            None => Clock::System,
            Some(ts) => {
                let t: DateTime<Utc> = ts
                    .parse()
                    .map_err(|e| ConfigError::Invalid(format!("bad fixed_time {ts:?}: {e}")))?;
                Clock::Fixed(t)
            }
        };
        let config = PipelineConfig {
            k: p.k.unwrap_or(defaults.k),
            n_per_list: p.n_per_list.unwrap_or(defaults.n_per_list),
            fetch_timeout_ms: p.fetch_timeout_ms.unwrap_or(defaults.fetch_timeout_ms),
            fetch_size_cap: p.fetch_size_cap.unwrap_or(defaults.fetch_size_cap),
            max_segment_chars: p.max_segment_chars.unwrap_or(defaults.max_segment_chars),
            extractor_window_cap_chars: p
                .extractor_window_cap_chars
                .unwrap_or(defaults.extractor_window_cap_chars),
            clock,
            ..defaults
        };

        let backends = Backends {
            parser,
            extractor,
            generator,
            judge,
            embedder,
            engine,
            fetcher,
            tokenizer: Arc::new(ApproxTokenizer),
        };
        Ok((config, backends))
    }
}

fn resolve(base_dir: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}

fn required(value: &Option<String>, field: &str) -> Result<String, ConfigError> {
    value
        .clone()
        .ok_or_else(|| ConfigError::Invalid(format!("{field} is required for this engine")))
}

/// Build a single chat backend from its spec, outside a full `Backends`
/// set (used for the preference-pair alternative extractor).
pub fn build_chat_backend(
    spec: &BackendSpec,
    base_dir: &Path,
) -> Result<Arc<dyn ChatBackend>, ConfigError> {
    build_chat(spec, base_dir)
}

fn build_chat(spec: &BackendSpec, base_dir: &Path) -> Result<Arc<dyn ChatBackend>, ConfigError> {
    match spec {
        BackendSpec::Scripted { fixtures } => {
            let path = resolve(base_dir, &fixtures.to_string_lossy());
            let data = std::fs::read_to_string(&path).map_err(|source| ConfigError::Io {
                path: path.clone(),
                source,
            })?;
            let map: HashMap<String, String> =
                serde_json::from_str(&data).map_err(|e| ConfigError::Fixture {
                    path,
                    message: e.to_string(),
                })?;
            Ok(Arc::new(make_scripted_backend(map)))
        }
        BackendSpec::Remote {
            endpoint,
            api_key_env,
            model,
            temperature,
            seed,
            timeout_ms,
        } => Ok(Arc::new(
            RemoteChatBackend::new(RemoteConfig {
                endpoint: endpoint.clone(),
                api_key_env: api_key_env.clone(),
                model: model.clone(),
                temperature: temperature.unwrap_or(0.0),
                seed: *seed,
                timeout: Duration::from_millis(timeout_ms.unwrap_or(30_000)),
            })
            .map_err(|e| ConfigError::Invalid(e.to_string()))?,
        )),
    }
}

fn load_mock_fetcher(path: &Path) -> Result<MockFetcher, ConfigError> {
    let data = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut fetcher = MockFetcher::new();
    for (i, line) in data.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: MockPageEntry =
            serde_json::from_str(line).map_err(|e| ConfigError::Fixture {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })?;
        fetcher.insert(
            &entry.url,
            entry.status,
            &entry.content_type,
            entry.body.into_bytes(),
        );
    }
    Ok(fetcher)
}
