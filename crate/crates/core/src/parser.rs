//! The parser stage: one model call that decides whether a request needs
//! Internet search and, if so, emits the keyword lists, plus strict
//! parsing of the model's structured reply.

use std::collections::BTreeMap;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{complete, ChatBackend, ChatCall, ChatReply, GatewayError};

pub const PARSER_TEMPLATE_VERSION: &str = "parser_prompt_v1";
const PARSER_TEMPLATE: &str = include_str!("../templates/parser_prompt_v1.txt");

const FORMAT_REMINDER: &str = "\n\nReminder: reply with exactly one JSON object in the declared \
format, with no surrounding prose or code fences.";

/// A user request entering the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRequest {
    pub id: String,
    pub text: String,
    pub received_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language_hint: Option<String>,
}

impl InferenceRequest {
    pub fn new(id: impl Into<String>, text: impl Into<String>, received_at: DateTime<Utc>) -> Result<Self, ParserError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(ParserError::EmptyRequest);
        }
        Ok(InferenceRequest {
            id: id.into(),
            text,
            received_at,
            language_hint: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeywordRole {
    Main,
    Auxiliary,
}

/// One language's search keywords.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordList {
    pub language: String,
    pub keywords: Vec<String>,
    pub role: KeywordRole,
}

impl KeywordList {
    pub fn query_text(&self) -> String {
        self.keywords.join(" ")
    }
}

/// How the model handled temporal context for the search keywords.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum TimeAnnotation {
    None,
    ExplicitDateInjected { date: NaiveDate },
    DeliberatelyOmitted,
}

/// The parser stage's validated decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseOutcome {
    pub needs_search: bool,
    pub keyword_lists: Vec<KeywordList>,
    pub time_annotation: TimeAnnotation,
}

impl ParseOutcome {
    pub fn no_search() -> Self {
        ParseOutcome {
            needs_search: false,
            keyword_lists: Vec::new(),
            time_annotation: TimeAnnotation::None,
        }
    }

    pub fn main_list(&self) -> Option<&KeywordList> {
        self.keyword_lists.iter().find(|l| l.role == KeywordRole::Main)
    }
}

#[derive(Debug, Error)]
pub enum ParserError {
    #[error("request text is empty")]
    EmptyRequest,
    #[error("reply not in the declared structured format: {0}")]
    Schema(String),
    #[error("inconsistent reply: {0}")]
    Consistency(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Build the single parser call: decision, keywords, auxiliary lists and
/// time judgment all demanded in one reply. `now` is embedded so the
/// model can inject or withhold dates.
pub fn build_parser_prompt(request: &InferenceRequest, now: DateTime<Utc>) -> ChatCall {
    let system = PARSER_TEMPLATE.replace("{{NOW}}", &now.format("%Y-%m-%d %H:%M:%S UTC").to_string());
    ChatCall::new(system, request.text.clone())
}

/// The reply wire format (strict JSON).
#[derive(Debug, Serialize, Deserialize)]
struct WireOutcome {
    needs_search: bool,
    #[serde(default)]
    language: Option<String>,
    #[serde(default)]
    keywords: Vec<String>,
    #[serde(default)]
    aux_keywords: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    time_mode: Option<String>,
    #[serde(default)]
    injected_date: Option<String>,
}

/// Strip optional markdown code fences around a JSON reply.
fn strip_fences(text: &str) -> &str {
    let t = text.trim();
    let t = t
        .strip_prefix("```json")
        .or_else(|| t.strip_prefix("```"))
        .unwrap_or(t);
    t.strip_suffix("```").unwrap_or(t).trim()
}

/// Parse and validate a raw parser reply.
pub fn parse_parser_reply(reply_text: &str) -> Result<ParseOutcome, ParserError> {
    let wire: WireOutcome = serde_json::from_str(strip_fences(reply_text))
        .map_err(|e| ParserError::Schema(e.to_string()))?;

    let has_keywords = !wire.keywords.is_empty() || !wire.aux_keywords.is_empty();
    if !wire.needs_search {
        if has_keywords {
            return Err(ParserError::Consistency(
                "needs_search is false but keywords are present".into(),
            ));
        }
        return Ok(ParseOutcome::no_search());
    }
    if wire.keywords.is_empty() {
        return Err(ParserError::Consistency(
            "needs_search is true but the main keyword list is empty".into(),
        ));
    }
    let check = |kws: &[String]| -> Result<(), ParserError> {
        if kws.iter().any(|k| k.trim().is_empty()) {
            Err(ParserError::Consistency("whitespace-only keyword".into()))
        } else {
            Ok(())
        }
    };
    check(&wire.keywords)?;
    let mut lists = vec![KeywordList {
        language: wire.language.unwrap_or_else(|| "und".into()),
        keywords: wire.keywords,
        role: KeywordRole::Main,
    }];
    for (lang, kws) in wire.aux_keywords {
        if kws.is_empty() {
            continue;
        }
        check(&kws)?;
        lists.push(KeywordList {
            language: lang,
            keywords: kws,
            role: KeywordRole::Auxiliary,
        });
    }
    let time_annotation = match wire.time_mode.as_deref() {
        None | Some("none") => TimeAnnotation::None,
        Some("omit") => TimeAnnotation::DeliberatelyOmitted,
        Some("inject") => {
            let raw = wire
                .injected_date
                .ok_or_else(|| ParserError::Schema("time_mode inject without injected_date".into()))?;
            let date = NaiveDate::parse_from_str(&raw, "%Y-%m-%d")
                .map_err(|e| ParserError::Schema(format!("bad injected_date: {e}")))?;
            TimeAnnotation::ExplicitDateInjected { date }
        }
        Some(other) => return Err(ParserError::Schema(format!("unknown time_mode {other:?}"))),
    };
    Ok(ParseOutcome {
        needs_search: true,
        keyword_lists: lists,
        time_annotation,
    })
}

/// Serialize an outcome back to the wire format (round-trip inverse of
/// [`parse_parser_reply`]).
pub fn serialize_outcome(outcome: &ParseOutcome) -> String {
    let mut aux = BTreeMap::new();
    let mut language = None;
    let mut keywords = Vec::new();
    for list in &outcome.keyword_lists {
        match list.role {
            KeywordRole::Main => {
                language = Some(list.language.clone());
                keywords = list.keywords.clone();
            }
            KeywordRole::Auxiliary => {
                aux.insert(list.language.clone(), list.keywords.clone());
            }
        }
    }
    let (time_mode, injected_date) = match &outcome.time_annotation {
        TimeAnnotation::None => ("none".to_string(), None),
        TimeAnnotation::DeliberatelyOmitted => ("omit".to_string(), None),
        TimeAnnotation::ExplicitDateInjected { date } => {
            ("inject".to_string(), Some(date.format("%Y-%m-%d").to_string()))
        }
    };
    serde_json::to_string(&WireOutcome {
        needs_search: outcome.needs_search,
        language,
        keywords,
        aux_keywords: aux,
        time_mode: Some(time_mode),
        injected_date,
    })
    .expect("wire outcome serializes")
}

/// Step 1 of the pipeline: one chat call, parsed and validated. A schema
/// failure triggers exactly one re-ask with a format reminder, then fails.
pub fn decide_and_extract(
    backend: &dyn ChatBackend,
    request: &InferenceRequest,
    now: DateTime<Utc>,
) -> Result<(ParseOutcome, Vec<ChatReply>), ParserError> {
    let call = build_parser_prompt(request, now);
    let reply = complete(backend, &call)?;
    match parse_parser_reply(&reply.text) {
        Ok(outcome) => Ok((outcome, vec![reply])),
        Err(ParserError::Schema(_)) => {
            let retry_call = ChatCall {
                user_text: format!("{}{}", call.user_text, FORMAT_REMINDER),
                ..call
            };
            let retry = complete(backend, &retry_call)?;
            let outcome = parse_parser_reply(&retry.text)?;
            Ok((outcome, vec![reply, retry]))
        }
        Err(e) => Err(e),
    }
}
