//! End-to-end orchestration: parse → search → rerank → extract → merge →
//! generate, with a structured trace, per-stage token accounting and an
//! HTTP serving front end.
//!
//! Evidence is an enhancement, not a requirement: every stage up to
//! generation fails open to an unaugmented answer; only the final
//! generation call is fatal.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extractor::{
    extract_all, merge_and_assemble, EnrichedPrompt, DEFAULT_WINDOW_CAP_CHARS,
};
use crate::gateway::{complete, ChatBackend, ChatReply, EmbedBackend, GatewayError};
use crate::parser::{decide_and_extract, InferenceRequest, ParseOutcome};
use crate::reranker::{rerank, PoolEntry};
use crate::search::{gather, Fetcher, GatherParams, SearchEngineClient};
use crate::segmenter::TaggedDocument;
use crate::tokenizer::Tokenizer;

/// Time source; fixed time makes traces byte-reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    System,
    Fixed(DateTime<Utc>),
}

impl Clock {
    pub fn now(&self) -> DateTime<Utc> {
        match self {
            Clock::System => Utc::now(),
            Clock::Fixed(t) => *t,
        }
    }

    fn deterministic(&self) -> bool {
        matches!(self, Clock::Fixed(_))
    }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub k: usize,
    pub n_per_list: usize,
    pub fetch_timeout_ms: u64,
    pub fetch_size_cap: usize,
    pub max_parallel_fetch: usize,
    pub max_parallel_extract: usize,
    pub max_segment_chars: usize,
    pub extractor_window_cap_chars: usize,
    pub clock: Clock,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            k: 6,
            n_per_list: 10,
            fetch_timeout_ms: 8000,
            fetch_size_cap: 2 * 1024 * 1024,
            max_parallel_fetch: 8,
            max_parallel_extract: 4,
            max_segment_chars: crate::segmenter::DEFAULT_MAX_SEGMENT_CHARS,
            extractor_window_cap_chars: DEFAULT_WINDOW_CAP_CHARS,
            clock: Clock::System,
        }
    }
}

/// All externally-bound capabilities, shareable across concurrent requests.
#[derive(Clone)]
pub struct Backends {
    pub parser: Arc<dyn ChatBackend>,
    pub extractor: Arc<dyn ChatBackend>,
    pub generator: Arc<dyn ChatBackend>,
    pub judge: Option<Arc<dyn ChatBackend>>,
    pub embedder: Arc<dyn EmbedBackend>,
    pub engine: Arc<dyn SearchEngineClient>,
    pub fetcher: Arc<dyn Fetcher>,
    pub tokenizer: Arc<dyn Tokenizer>,
}

/// One executed stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub duration_ms: u64,
    pub counts: BTreeMap<String, u64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTokens {
    pub input: u64,
    pub output: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub per_stage: BTreeMap<String, StageTokens>,
    pub total_input: u64,
    pub total_output: u64,
}

impl TokenUsage {
    fn add(&mut self, stage: &str, replies: &[ChatReply]) {
        let entry = self.per_stage.entry(stage.to_string()).or_default();
        for r in replies {
            entry.input += r.input_tokens;
            entry.output += r.output_tokens;
            self.total_input += r.input_tokens;
            self.total_output += r.output_tokens;
        }
    }
}

/// The pipeline's product.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    pub augmented: bool,
    pub trace: Vec<StageRecord>,
    pub token_usage: TokenUsage,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("generation failed: {0}")]
    Generation(#[from] GatewayError),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

struct StageTimer {
    start: Instant,
    deterministic: bool,
}

impl StageTimer {
    fn start(deterministic: bool) -> Self {
        StageTimer {
            start: Instant::now(),
            deterministic,
        }
    }

    fn elapsed_ms(&self) -> u64 {
        if self.deterministic {
            0
        } else {
            self.start.elapsed().as_millis() as u64
        }
    }
}

fn record(
    trace: &mut Vec<StageRecord>,
    stage: &str,
    timer: &StageTimer,
    counts: Vec<(&str, u64)>,
    warnings: Vec<String>,
) {
    trace.push(StageRecord {
        stage: stage.to_string(),
        duration_ms: timer.elapsed_ms(),
        counts: counts
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        warnings,
    });
}

/// Run the whole paradigm for one request.
pub fn answer(
    request: &InferenceRequest,
    config: &PipelineConfig,
    backends: &Backends,
) -> Result<Answer, PipelineError> {
    let det = config.clock.deterministic();
    let mut trace: Vec<StageRecord> = Vec::new();
    let mut usage = TokenUsage::default();

    // Stage 1: parse.
    let timer = StageTimer::start(det);
    let now = config.clock.now();
    let (outcome, parse_warnings) =
        match decide_and_extract(backends.parser.as_ref(), request, now) {
            Ok((outcome, replies)) => {
                usage.add("parse", &replies);
                let warnings = if replies.len() > 1 {
                    vec!["schema retry used".to_string()]
                } else {
                    Vec::new()
                };
                (outcome, warnings)
            }
            Err(e) => (
                ParseOutcome::no_search(),
                vec![format!("parser failed, degraded to no-search: {e}")],
            ),
        };
    record(
        &mut trace,
        "parse",
        &timer,
        vec![
            ("needs_search", outcome.needs_search as u64),
            ("keyword_lists", outcome.keyword_lists.len() as u64),
        ],
        parse_warnings,
    );

    let mut enriched: Option<EnrichedPrompt> = None;

    if outcome.needs_search {
        // Stage 2: search + fetch + segment.
        let timer = StageTimer::start(det);
        let params = GatherParams {
            n_per_list: config.n_per_list,
            timeout: std::time::Duration::from_millis(config.fetch_timeout_ms),
            size_cap: config.fetch_size_cap,
            fetched_at: now,
        };
        let (plain_docs, gather_trace) = gather(
            &outcome,
            backends.engine.as_ref(),
            backends.fetcher.as_ref(),
            &params,
        );
        let pool: Vec<PoolEntry> = plain_docs
            .iter()
            .filter(|d| !d.body_text.trim().is_empty())
            .map(|d| PoolEntry {
                doc: TaggedDocument::from_body_with_cap(
                    d.url.clone(),
                    d.snippet.clone(),
                    &d.body_text,
                    config.max_segment_chars,
                ),
                source_list: d.source_list.clone(),
                engine_rank: d.engine_rank,
            })
            .collect();
        record(
            &mut trace,
            "search",
            &timer,
            vec![
                ("documents", pool.len() as u64),
                ("fetch_failures", gather_trace.len() as u64),
            ],
            gather_trace.iter().map(|t| format!("{}: {}", t.url, t.note)).collect(),
        );

        if !pool.is_empty() {
            // Stage 3: rerank.
            let timer = StageTimer::start(det);
            match rerank(backends.embedder.as_ref(), &outcome, &pool, config.k) {
                Ok((selection, candidates, notes)) => {
                    record(
                        &mut trace,
                        "rerank",
                        &timer,
                        vec![
                            ("candidates", candidates.len() as u64),
                            ("selected", selection.entries.len() as u64),
                        ],
                        notes,
                    );

                    // Stage 4: extract.
                    let timer = StageTimer::start(det);
                    let (results, replies) = extract_all(
                        backends.extractor.as_ref(),
                        request,
                        &selection,
                        &pool,
                        config.extractor_window_cap_chars,
                    );
                    usage.add("extract", &replies);
                    let contributing = results.iter().filter(|r| r.tags.is_some()).count();
                    let warnings: Vec<String> = results
                        .iter()
                        .flat_map(|r| r.warnings.iter().cloned())
                        .collect();
                    record(
                        &mut trace,
                        "extract",
                        &timer,
                        vec![
                            ("extracted", results.len() as u64),
                            ("contributing", contributing as u64),
                        ],
                        warnings,
                    );

                    // Stage 5: merge.
                    let timer = StageTimer::start(det);
                    let prompt = merge_and_assemble(request, &pool, &results);
                    record(
                        &mut trace,
                        "merge",
                        &timer,
                        vec![
                            ("blocks", prompt.merged.blocks.len() as u64),
                            ("evidence_chars", prompt.merged.total_chars as u64),
                        ],
                        if prompt.is_augmented() {
                            Vec::new()
                        } else {
                            vec!["no contributing documents; unaugmented generation".to_string()]
                        },
                    );
                    enriched = Some(prompt);
                }
                Err(e) => {
                    record(
                        &mut trace,
                        "rerank",
                        &timer,
                        vec![("candidates", 0)],
                        vec![format!("rerank failed, degraded: {e}")],
                    );
                }
            }
        }
    }

    let prompt = enriched.unwrap_or_else(|| EnrichedPrompt {
        request_text: request.text.clone(),
        merged: crate::extractor::MergedText {
            blocks: Vec::new(),
            total_chars: 0,
        },
        template_version: crate::extractor::GENERATION_TEMPLATE_VERSION.to_string(),
    });
    let augmented = prompt.is_augmented();

    // Stage 6: generate — the only fatal stage.
    let timer = StageTimer::start(det);
    let call = prompt.render();
    let reply = complete(backends.generator.as_ref(), &call)?;
    usage.add("generate", std::slice::from_ref(&reply));
    record(
        &mut trace,
        "generate",
        &timer,
        vec![("evidence_blocks", prompt.merged.blocks.len() as u64)],
        Vec::new(),
    );

    Ok(Answer {
        text: reply.text,
        augmented,
        trace,
        token_usage: usage,
    })
}

/// Token count of a rendered enriched prompt under `tokenizer`.
pub fn count_prompt_tokens(prompt: &EnrichedPrompt, tokenizer: &dyn Tokenizer) -> usize {
    let call = prompt.render();
    tokenizer.count(&call.system_text) + tokenizer.count(&call.user_text)
}

// --- HTTP front end ---

#[derive(Debug, Deserialize)]
struct AnswerRequestBody {
    id: String,
    text: String,
}

#[derive(Clone)]
struct ServeState {
    config: Arc<PipelineConfig>,
    backends: Backends,
}

async fn handle_answer(
    axum::extract::State(state): axum::extract::State<ServeState>,
    body: axum::body::Bytes,
) -> axum::response::Response {
    use axum::http::StatusCode;
    use axum::response::IntoResponse;

    let parsed: Result<AnswerRequestBody, _> = serde_json::from_slice(&body);
    let req_body = match parsed {
        Ok(b) => b,
        Err(e) => {
            return (StatusCode::BAD_REQUEST, format!("malformed body: {e}")).into_response()
        }
    };
    let received_at = state.config.clock.now();
    let request = match InferenceRequest::new(req_body.id, req_body.text, received_at) {
        Ok(r) => r,
        Err(e) => return (StatusCode::BAD_REQUEST, e.to_string()).into_response(),
    };
    let config = state.config.clone();
    let backends = state.backends.clone();
    let result =
        tokio::task::spawn_blocking(move || answer(&request, &config, &backends)).await;
    match result {
        Ok(Ok(ans)) => {
            let json = serde_json::to_string(&ans).expect("answer serializes");
            (
                StatusCode::OK,
                [(axum::http::header::CONTENT_TYPE, "application/json")],
                json,
            )
                .into_response()
        }
        Ok(Err(e)) => (StatusCode::BAD_GATEWAY, e.to_string()).into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

async fn handle_healthz() -> &'static str {
    "ok"
}

pub fn router(config: PipelineConfig, backends: Backends) -> axum::Router {
    let state = ServeState {
        config: Arc::new(config),
        backends,
    };
    axum::Router::new()
        .route("/v1/answer", axum::routing::post(handle_answer))
        .route("/healthz", axum::routing::get(handle_healthz))
        .with_state(state)
}

/// Serve the pipeline over HTTP until the process exits.
pub fn serve(addr: std::net::SocketAddr, config: PipelineConfig, backends: Backends) -> std::io::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        axum::serve(listener, router(config, backends)).await
    })
}
