//! Search-engine querying, page fetching and HTML body reduction.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parser::{KeywordList, KeywordRole, ParseOutcome};

pub mod html;

pub use html::extract_body;

/// Which keyword list produced a hit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "language", rename_all = "lowercase")]
pub enum SourceList {
    Main,
    Auxiliary(String),
}

impl SourceList {
    pub fn is_main(&self) -> bool {
        matches!(self, SourceList::Main)
    }
}

/// One search-engine result.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchHit {
    pub url: String,
    pub title: String,
    pub snippet: String,
    pub engine_rank: u32,
    pub source_list: SourceList,
}

/// A fetched page reduced to plain text, still carrying its hit context
/// for downstream tie-breaking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlainDocument {
    pub url: String,
    pub snippet: String,
    pub body_text: String,
    pub fetched_at: DateTime<Utc>,
    pub source_list: SourceList,
    pub engine_rank: u32,
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("engine rate limit: {0}")]
    Quota(String),
    #[error("bad engine reply: {0}")]
    BadReply(String),
    #[error("fixture error: {0}")]
    Fixture(String),
}

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("timeout fetching {0}")]
    Timeout(String),
    #[error("http status {status} for {url}")]
    Http { url: String, status: u16 },
    #[error("response for {url} exceeds size cap of {cap} bytes")]
    TooLarge { url: String, cap: usize },
    #[error("content-type {content_type:?} for {url} is not HTML-like")]
    NonHtml { url: String, content_type: String },
    #[error("transport error for {url}: {message}")]
    Transport { url: String, message: String },
}

/// A raw (url, title, snippet) triple before source tagging.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawHit {
    pub url: String,
    pub title: String,
    pub snippet: String,
}

/// Web-search API adapter.
pub trait SearchEngineClient: Send + Sync {
    fn query(&self, query_text: &str, n: usize) -> Result<Vec<RawHit>, SearchError>;
}

/// Query an engine with one keyword list; hits come back in engine order,
/// ranked from 1 and tagged with the list they came from.
pub fn search(
    engine: &dyn SearchEngineClient,
    list: &KeywordList,
    n: usize,
) -> Result<Vec<SearchHit>, SearchError> {
    let source = match list.role {
        KeywordRole::Main => SourceList::Main,
        KeywordRole::Auxiliary => SourceList::Auxiliary(list.language.clone()),
    };
    let raw = engine.query(&list.query_text(), n)?;
    Ok(raw
        .into_iter()
        .take(n)
        .enumerate()
        .map(|(i, h)| SearchHit {
            url: h.url,
            title: h.title,
            snippet: h.snippet,
            engine_rank: (i + 1) as u32,
            source_list: source.clone(),
        })
        .collect())
}

/// File-backed mock engine reading canned SERPs from a JSONL fixture
/// (one hit per line: url, title, snippet, rank, optional query key).
pub struct MockEngine {
    entries: Vec<MockSerpEntry>,
}

#[derive(Debug, Deserialize)]
struct MockSerpEntry {
    url: String,
    title: String,
    #[serde(default)]
    snippet: String,
    rank: u32,
    /// When set, the entry only answers this exact query.
    #[serde(default)]
    query: Option<String>,
}

impl MockEngine {
    pub fn from_path(path: &Path) -> Result<Self, SearchError> {
        let data = std::fs::read_to_string(path)
            .map_err(|e| SearchError::Fixture(format!("{}: {e}", path.display())))?;
        Self::from_jsonl(&data)
    }

    pub fn from_jsonl(data: &str) -> Result<Self, SearchError> {
        let mut entries = Vec::new();
        for (i, line) in data.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: MockSerpEntry = serde_json::from_str(line)
                .map_err(|e| SearchError::Fixture(format!("line {}: {e}", i + 1)))?;
            entries.push(entry);
        }
        Ok(MockEngine { entries })
    }
}

impl SearchEngineClient for MockEngine {
    fn query(&self, query_text: &str, n: usize) -> Result<Vec<RawHit>, SearchError> {
        let keyed: Vec<&MockSerpEntry> = self
            .entries
            .iter()
            .filter(|e| e.query.as_deref() == Some(query_text))
            .collect();
        let mut selected: Vec<&MockSerpEntry> = if keyed.is_empty() {
            self.entries.iter().filter(|e| e.query.is_none()).collect()
        } else {
            keyed
        };
        selected.sort_by_key(|e| e.rank);
        Ok(selected
            .into_iter()
            .take(n)
            .map(|e| RawHit {
                url: e.url.clone(),
                title: e.title.clone(),
                snippet: e.snippet.clone(),
            })
            .collect())
    }
}

/// Google-style JSON web-search API (`items[].link/title/snippet`).
pub struct GoogleStyleEngine {
    endpoint: String,
    api_key_env: String,
    client: reqwest::blocking::Client,
}

/// Bing-style JSON web-search API (`webPages.value[].url/name/snippet`).
pub struct BingStyleEngine {
    endpoint: String,
    api_key_env: String,
    client: reqwest::blocking::Client,
}

impl GoogleStyleEngine {
    pub fn new(endpoint: String, api_key_env: String) -> Self {
        GoogleStyleEngine {
            endpoint,
            api_key_env,
            client: reqwest::blocking::Client::new(),
        }
    }
}

impl BingStyleEngine {
    pub fn new(endpoint: String, api_key_env: String) -> Self {
        BingStyleEngine {
            endpoint,
            api_key_env,
            client: reqwest::blocking::Client::new(),
        }
    }
}

fn engine_key(env: &str) -> Result<String, SearchError> {
    std::env::var(env).map_err(|_| SearchError::Transport(format!("env var {env} not set")))
}

impl SearchEngineClient for GoogleStyleEngine {
    fn query(&self, query_text: &str, n: usize) -> Result<Vec<RawHit>, SearchError> {
        let key = engine_key(&self.api_key_env)?;
        let resp = self
            .client
            .get(&self.endpoint)
            .query(&[("key", key.as_str()), ("q", query_text), ("num", &n.to_string())])
            .send()
            .map_err(|e| SearchError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 {
            return Err(SearchError::Quota(resp.text().unwrap_or_default()));
        }
        if !(200..300).contains(&status) {
            return Err(SearchError::Transport(format!("status {status}")));
        }
        #[derive(Deserialize)]
        struct Item {
            link: String,
            #[serde(default)]
            title: String,
            #[serde(default)]
            snippet: String,
        }
        #[derive(Deserialize)]
        struct Body {
            #[serde(default)]
            items: Vec<Item>,
        }
        let body: Body = resp.json().map_err(|e| SearchError::BadReply(e.to_string()))?;
        Ok(body
            .items
            .into_iter()
            .map(|i| RawHit {
                url: i.link,
                title: i.title,
                snippet: i.snippet,
            })
            .collect())
    }
}

impl SearchEngineClient for BingStyleEngine {
    fn query(&self, query_text: &str, n: usize) -> Result<Vec<RawHit>, SearchError> {
        let key = engine_key(&self.api_key_env)?;
        let resp = self
            .client
            .get(&self.endpoint)
            .header("Ocp-Apim-Subscription-Key", key)
            .query(&[("q", query_text), ("count", &n.to_string())])
            .send()
            .map_err(|e| SearchError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 {
            return Err(SearchError::Quota(resp.text().unwrap_or_default()));
        }
        if !(200..300).contains(&status) {
            return Err(SearchError::Transport(format!("status {status}")));
        }
        #[derive(Deserialize)]
        struct Value {
            url: String,
            #[serde(default)]
            name: String,
            #[serde(default)]
            snippet: String,
        }
        #[derive(Deserialize)]
        struct WebPages {
            #[serde(default)]
            value: Vec<Value>,
        }
        #[derive(Deserialize)]
        struct Body {
            #[serde(default, rename = "webPages")]
            web_pages: Option<WebPages>,
        }
        let body: Body = resp.json().map_err(|e| SearchError::BadReply(e.to_string()))?;
        Ok(body
            .web_pages
            .map(|w| w.value)
            .unwrap_or_default()
            .into_iter()
            .map(|v| RawHit {
                url: v.url,
                title: v.name,
                snippet: v.snippet,
            })
            .collect())
    }
}

/// Fetched page bytes plus content type, before decoding.
#[derive(Debug, Clone)]
pub struct FetchedPage {
    pub content_type: String,
    pub body: Vec<u8>,
}

/// Page fetcher port.
pub trait Fetcher: Send + Sync {
    fn fetch_raw(&self, url: &str, timeout: Duration, size_cap: usize) -> Result<FetchedPage, FetchError>;
}

/// Fetch a URL and decode it to HTML text, enforcing the size cap and an
/// HTML-like content type.
pub fn fetch(
    fetcher: &dyn Fetcher,
    url: &str,
    timeout: Duration,
    size_cap: usize,
) -> Result<String, FetchError> {
    let page = fetcher.fetch_raw(url, timeout, size_cap)?;
    if page.body.len() > size_cap {
        return Err(FetchError::TooLarge {
            url: url.to_string(),
            cap: size_cap,
        });
    }
    let ct = page.content_type.to_ascii_lowercase();
    let html_like = ct.is_empty()
        || ct.contains("text/html")
        || ct.contains("application/xhtml")
        || ct.contains("text/plain");
    if !html_like {
        return Err(FetchError::NonHtml {
            url: url.to_string(),
            content_type: page.content_type,
        });
    }
    Ok(String::from_utf8_lossy(&page.body).into_owned())
}

/// HTTP fetcher backed by a blocking client.
pub struct HttpFetcher;

impl Fetcher for HttpFetcher {
    fn fetch_raw(&self, url: &str, timeout: Duration, size_cap: usize) -> Result<FetchedPage, FetchError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| FetchError::Transport {
                url: url.to_string(),
                message: e.to_string(),
            })?;
        let resp = client.get(url).send().map_err(|e| {
            if e.is_timeout() {
                FetchError::Timeout(url.to_string())
            } else {
                FetchError::Transport {
                    url: url.to_string(),
                    message: e.to_string(),
                }
            }
        })?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(FetchError::Http {
                url: url.to_string(),
                status,
            });
        }
        let content_type = resp
            .headers()
            .get(reqwest::header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .unwrap_or("")
            .to_string();
        let body = resp.bytes().map_err(|e| FetchError::Transport {
            url: url.to_string(),
            message: e.to_string(),
        })?;
        if body.len() > size_cap {
            return Err(FetchError::TooLarge {
                url: url.to_string(),
                cap: size_cap,
            });
        }
        Ok(FetchedPage {
            content_type,
            body: body.to_vec(),
        })
    }
}

/// In-memory fetcher for tests and canned runs.
#[derive(Default)]
pub struct MockFetcher {
    pages: HashMap<String, (u16, String, Vec<u8>)>,
}

impl MockFetcher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_page(mut self, url: &str, status: u16, content_type: &str, body: &str) -> Self {
        self.pages.insert(
            url.to_string(),
            (status, content_type.to_string(), body.as_bytes().to_vec()),
        );
        self
    }

    pub fn insert(&mut self, url: &str, status: u16, content_type: &str, body: Vec<u8>) {
        self.pages.insert(url.to_string(), (status, content_type.to_string(), body));
    }
}

impl Fetcher for MockFetcher {
    fn fetch_raw(&self, url: &str, _timeout: Duration, size_cap: usize) -> Result<FetchedPage, FetchError> {
        let (status, content_type, body) = self.pages.get(url).ok_or_else(|| FetchError::Http {
            url: url.to_string(),
            status: 404,
        })?;
        if !(200..300).contains(status) {
            return Err(FetchError::Http {
                url: url.to_string(),
                status: *status,
            });
        }
        if body.len() > size_cap {
            return Err(FetchError::TooLarge {
                url: url.to_string(),
                cap: size_cap,
            });
        }
        Ok(FetchedPage {
            content_type: content_type.clone(),
            body: body.clone(),
        })
    }
}

/// Canonical form for dedup: lowercase scheme/host, strip fragment, keep
/// the query string.
pub fn canonical_url(raw: &str) -> String {
    match url::Url::parse(raw) {
        Ok(mut u) => {
            u.set_fragment(None);
            u.to_string()
        }
        Err(_) => raw.to_string(),
    }
}

/// Per-document failure note kept alongside gather output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatherTraceEntry {
    pub url: String,
    pub note: String,
}

#[derive(Debug, Clone)]
pub struct GatherParams {
    pub n_per_list: usize,
    pub timeout: Duration,
    pub size_cap: usize,
    pub fetched_at: DateTime<Utc>,
}

impl Default for GatherParams {
    fn default() -> Self {
        GatherParams {
            n_per_list: 10,
            timeout: Duration::from_secs(8),
            size_cap: 2 * 1024 * 1024,
            fetched_at: Utc::now(),
        }
    }
}

/// Steps 2–3 handoff: query every keyword list, pool the hits (main list
/// first, then auxiliary, engine order within each), dedupe by canonical
/// URL, fetch and reduce each page. Individual failures never abort the
/// gather; they become trace entries.
pub fn gather(
    outcome: &ParseOutcome,
    engine: &dyn SearchEngineClient,
    fetcher: &dyn Fetcher,
    params: &GatherParams,
) -> (Vec<PlainDocument>, Vec<GatherTraceEntry>) {
    let mut trace = Vec::new();
    let mut hits: Vec<SearchHit> = Vec::new();
    let mut lists: Vec<&KeywordList> = outcome.keyword_lists.iter().collect();
    lists.sort_by_key(|l| match l.role {
        KeywordRole::Main => 0,
        KeywordRole::Auxiliary => 1,
    });
    for list in lists {
        match search(engine, list, params.n_per_list) {
            Ok(mut h) => hits.append(&mut h),
            Err(e) => trace.push(GatherTraceEntry {
                url: String::new(),
                note: format!("search failed for {:?} list: {e}", list.language),
            }),
        }
    }

    let mut seen = HashSet::new();
    let unique: Vec<SearchHit> = hits
        .into_iter()
        .filter(|h| seen.insert(canonical_url(&h.url)))
        .collect();

    use rayon::prelude::*;
    let results: Vec<Result<PlainDocument, GatherTraceEntry>> = unique
        .par_iter()
        .map(|hit| {
            match fetch(fetcher, &hit.url, params.timeout, params.size_cap) {
                Ok(html) => {
                    let body_text = extract_body(&html);
                    Ok(PlainDocument {
                        url: hit.url.clone(),
                        snippet: hit.snippet.clone(),
                        body_text,
                        fetched_at: params.fetched_at,
                        source_list: hit.source_list.clone(),
                        engine_rank: hit.engine_rank,
                    })
                }
                Err(e) => Err(GatherTraceEntry {
                    url: hit.url.clone(),
                    note: e.to_string(),
                }),
            }
        })
        .collect();

    let mut docs = Vec::new();
    for r in results {
        match r {
            Ok(d) => docs.push(d),
            Err(t) => trace.push(t),
        }
    }
    (docs, trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse_parser_reply;

    fn list(role: KeywordRole, kws: &[&str]) -> KeywordList {
        KeywordList {
            language: "en".into(),
            keywords: kws.iter().map(|s| s.to_string()).collect(),
            role,
        }
    }

    fn serp(lines: &[(&str, u32)]) -> MockEngine {
        let jsonl: String = lines
            .iter()
            .map(|(url, rank)| {
                format!(r#"{{"url":"{url}","title":"t","snippet":"s","rank":{rank}}}"#)
            })
            .collect::<Vec<_>>()
            .join("\n");
        MockEngine::from_jsonl(&jsonl).unwrap()
    }

    #[test]
    fn mock_engine_all_hits_within_n() {
        let engine = serp(&[("https://a.example/", 1), ("https://b.example/", 2), ("https://c.example/", 3)]);
        let hits = search(&engine, &list(KeywordRole::Main, &["q"]), 10).unwrap();
        assert_eq!(hits.len(), 3);
        assert_eq!(
            hits.iter().map(|h| h.engine_rank).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
    }

    #[test]
    fn mock_engine_truncates_in_order() {
        let entries: Vec<(String, u32)> = (1..=10)
            .map(|i| (format!("https://h{i}.example/"), i))
            .collect();
        let refs: Vec<(&str, u32)> = entries.iter().map(|(u, r)| (u.as_str(), *r)).collect();
        let engine = serp(&refs);
        let hits = search(&engine, &list(KeywordRole::Main, &["q"]), 5).unwrap();
        assert_eq!(hits.len(), 5);
        assert_eq!(hits[0].url, "https://h1.example/");
        assert_eq!(hits[4].url, "https://h5.example/");
    }

    #[test]
    fn source_list_markers() {
        let engine = serp(&[("https://a.example/", 1)]);
        let main = search(&engine, &list(KeywordRole::Main, &["q"]), 5).unwrap();
        assert_eq!(main[0].source_list, SourceList::Main);
        let aux = search(&engine, &list(KeywordRole::Auxiliary, &["q"]), 5).unwrap();
        assert_eq!(aux[0].source_list, SourceList::Auxiliary("en".into()));
    }

    #[test]
    fn fetch_ok() {
        let fetcher = MockFetcher::new().with_page("https://x.example/", 200, "text/html", "<p>Hi</p>");
        let html = fetch(&fetcher, "https://x.example/", Duration::from_secs(1), 1024).unwrap();
        assert_eq!(html, "<p>Hi</p>");
    }

    #[test]
    fn fetch_404() {
        let fetcher = MockFetcher::new();
        let err = fetch(&fetcher, "https://gone.example/", Duration::from_secs(1), 1024).unwrap_err();
        assert!(matches!(err, FetchError::Http { status: 404, .. }));
    }

    #[test]
    fn fetch_too_large() {
        let cap = 64;
        let mut fetcher = MockFetcher::new();
        fetcher.insert("https://big.example/", 200, "text/html", vec![b'x'; cap + 1]);
        let err = fetch(&fetcher, "https://big.example/", Duration::from_secs(1), cap).unwrap_err();
        assert!(matches!(err, FetchError::TooLarge { .. }));
    }

    #[test]
    fn fetch_non_html() {
        let fetcher = MockFetcher::new().with_page("https://pdf.example/", 200, "application/pdf", "x");
        let err = fetch(&fetcher, "https://pdf.example/", Duration::from_secs(1), 1024).unwrap_err();
        assert!(matches!(err, FetchError::NonHtml { .. }));
    }

    #[test]
    fn canonical_lowercases_and_strips_fragment() {
        assert_eq!(
            canonical_url("HTTPS://Example.COM/Path?q=1#frag"),
            "https://example.com/Path?q=1"
        );
    }

    fn outcome_with_aux() -> ParseOutcome {
        parse_parser_reply(
            r#"{"needs_search": true, "language": "en", "keywords": ["main query"],
                "aux_keywords": {"zh": ["辅助 查询"]}, "time_mode": "none"}"#,
        )
        .unwrap()
    }

    #[test]
    fn gather_dedupes_by_canonical_url() {
        // Both lists return the same URL (one with a fragment).
        let jsonl = concat!(
            r#"{"url":"https://a.example/page#top","title":"t","snippet":"s","rank":1,"query":"main query"}"#,
            "\n",
            r#"{"url":"https://a.example/page","title":"t","snippet":"s","rank":1,"query":"辅助 查询"}"#
        );
        let engine = MockEngine::from_jsonl(jsonl).unwrap();
        let fetcher = MockFetcher::new().with_page("https://a.example/page#top", 200, "text/html", "<p>A</p>")
            .with_page("https://a.example/page", 200, "text/html", "<p>A</p>");
        let (docs, _trace) = gather(&outcome_with_aux(), &engine, &fetcher, &GatherParams::default());
        assert_eq!(docs.len(), 1);
    }

    #[test]
    fn gather_counts_conserved_on_failures() {
        let jsonl = (1..=5)
            .map(|i| format!(r#"{{"url":"https://h{i}.example/","title":"t","snippet":"s","rank":{i}}}"#))
            .collect::<Vec<_>>()
            .join("\n");
        let engine = MockEngine::from_jsonl(&jsonl).unwrap();
        // Only three of five pages resolve.
        let fetcher = MockFetcher::new()
            .with_page("https://h1.example/", 200, "text/html", "<p>1</p>")
            .with_page("https://h3.example/", 200, "text/html", "<p>3</p>")
            .with_page("https://h5.example/", 200, "text/html", "<p>5</p>");
        let outcome = parse_parser_reply(
            r#"{"needs_search": true, "keywords": ["anything"], "time_mode": "none"}"#,
        )
        .unwrap();
        let (docs, trace) = gather(&outcome, &engine, &fetcher, &GatherParams::default());
        assert_eq!(docs.len(), 3);
        assert_eq!(trace.len(), 2);
        assert_eq!(docs.len() + trace.len(), 5);
        // Deterministic input order, not completion order.
        assert_eq!(docs[0].url, "https://h1.example/");
        assert_eq!(docs[1].url, "https://h3.example/");
        assert_eq!(docs[2].url, "https://h5.example/");
    }

    #[test]
    fn gather_zero_successes_is_empty_not_fatal() {
        let engine = serp(&[("https://dead.example/", 1)]);
        let fetcher = MockFetcher::new();
        let outcome = parse_parser_reply(
            r#"{"needs_search": true, "keywords": ["x"], "time_mode": "none"}"#,
        )
        .unwrap();
        let (docs, trace) = gather(&outcome, &engine, &fetcher, &GatherParams::default());
        assert!(docs.is_empty());
        assert_eq!(trace.len(), 1);
    }

    #[test]
    fn gather_main_hits_precede_auxiliary() {
        let jsonl = concat!(
            r#"{"url":"https://main.example/","title":"t","snippet":"s","rank":1,"query":"main query"}"#,
            "\n",
            r#"{"url":"https://aux.example/","title":"t","snippet":"s","rank":1,"query":"辅助 查询"}"#
        );
        let engine = MockEngine::from_jsonl(jsonl).unwrap();
        let fetcher = MockFetcher::new()
            .with_page("https://main.example/", 200, "text/html", "<p>m</p>")
            .with_page("https://aux.example/", 200, "text/html", "<p>a</p>");
        let (docs, _) = gather(&outcome_with_aux(), &engine, &fetcher, &GatherParams::default());
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[0].source_list, SourceList::Main);
        assert!(matches!(docs[1].source_list, SourceList::Auxiliary(_)));
    }
}
