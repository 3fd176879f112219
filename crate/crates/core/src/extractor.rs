//! Steps 4–6: invoke the extractor model per tagged document, parse its
//! tag-list-or-None reply, resolve tags to text, merge evidence across
//! documents and assemble the enriched generation prompt.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::gateway::{complete, ChatBackend, ChatCall, ChatReply};
use crate::parser::InferenceRequest;
use crate::reranker::{PoolEntry, RankedSelection};
use crate::segmenter::{render_tagged, render_window, resolve_tags, TaggedDocument};

pub const EXTRACTOR_TEMPLATE_VERSION: &str = "extractor_prompt_v1";
pub const GENERATION_TEMPLATE_VERSION: &str = "generation_prompt_v1";
const EXTRACTOR_TEMPLATE: &str = include_str!("../templates/extractor_prompt_v1.txt");
const GENERATION_TEMPLATE: &str = include_str!("../templates/generation_prompt_v1.txt");

/// Default cap on the rendered tagged content embedded in one extractor
/// call; oversized documents are windowed by whole segments.
pub const DEFAULT_WINDOW_CAP_CHARS: usize = 24_000;

/// Per-document extraction: the relevant tag ids, or `None` when the
/// document holds nothing relevant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub doc_index: usize,
    pub tags: Option<BTreeSet<u32>>,
    pub warnings: Vec<String>,
}

/// Evidence blocks merged across contributing documents, in selection order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergedText {
    pub blocks: Vec<MergedBlock>,
    pub total_chars: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergedBlock {
    pub source_url: String,
    pub text: String,
}

/// The final generation prompt: original request plus merged evidence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrichedPrompt {
    pub request_text: String,
    pub merged: MergedText,
    pub template_version: String,
}

/// Build one extractor call embedding the request and the tagged content.
pub fn build_extractor_prompt(request: &InferenceRequest, doc: &TaggedDocument) -> ChatCall {
    assert!(!doc.segments.is_empty(), "document must have >= 1 segment");
    user_call(&request.text, &render_tagged(doc))
}

fn user_call(request_text: &str, tagged: &str) -> ChatCall {
    ChatCall::new(
        EXTRACTOR_TEMPLATE,
        format!("Request:\n{request_text}\n\nTagged content:\n{tagged}"),
    )
}

/// Parse an extractor reply. Total: malformed replies degrade to `None`
/// plus a warning, never an error.
pub fn parse_extractor_reply(reply_text: &str, doc: &TaggedDocument) -> ExtractionResult {
    parse_reply_inner(reply_text, doc, 0)
}

fn parse_reply_inner(reply_text: &str, doc: &TaggedDocument, doc_index: usize) -> ExtractionResult {
    let trimmed = reply_text.trim();
    let mut warnings = Vec::new();
    if trimmed.eq_ignore_ascii_case("none") {
        return ExtractionResult {
            doc_index,
            tags: None,
            warnings,
        };
    }
    let m = doc.tag_count();
    let mut tags = BTreeSet::new();
    let mut saw_token = false;
    for token in trimmed.split(|c: char| !(c.is_ascii_alphanumeric() || c == '-')) {
        let token = token.trim();
        if token.is_empty() {
            continue;
        }
        let id_str = token
            .strip_prefix("TAG-")
            .or_else(|| token.strip_prefix("tag-"))
            .or_else(|| token.strip_prefix("Tag-"))
            .unwrap_or(token);
        if let Ok(id) = id_str.parse::<u32>() {
            saw_token = true;
            if id >= 1 && id <= m {
                tags.insert(id);
            } else {
                warnings.push(format!("dropped out-of-range tag {id}"));
            }
        }
    }
    if tags.is_empty() {
        if saw_token {
            warnings.push("all tags out of range; degraded to None".into());
        } else {
            warnings.push(format!("unparseable reply {:?}; degraded to None", preview(trimmed)));
        }
        return ExtractionResult {
            doc_index,
            tags: None,
            warnings,
        };
    }
    ExtractionResult {
        doc_index,
        tags: Some(tags),
        warnings,
    }
}

fn preview(s: &str) -> String {
    if s.chars().count() <= 60 {
        s.to_string()
    } else {
        s.chars().take(60).collect::<String>() + "…"
    }
}

/// Split a document into windows of whole segments whose rendered size
/// stays under `cap_chars`. Tag ids keep their original numbering.
fn windows(doc: &TaggedDocument, cap_chars: usize) -> Vec<(usize, usize)> {
    let n = doc.segments.len();
    let mut out = Vec::new();
    let mut start = 0usize;
    let mut size = 0usize;
    for i in 0..n {
        // Rendered size of one segment: text plus the two tag markers.
        let seg_len = doc.segments[i].text.chars().count() + 24;
        if i > start && size + seg_len > cap_chars {
            out.push((start, i));
            start = i;
            size = 0;
        }
        size += seg_len;
    }
    if start < n {
        out.push((start, n));
    }
    out
}

/// Extract one document, windowing when the rendered content exceeds
/// `cap_chars`; window tag sets are unioned.
pub fn extract_document(
    backend: &dyn ChatBackend,
    request: &InferenceRequest,
    doc: &TaggedDocument,
    doc_index: usize,
    cap_chars: usize,
) -> (ExtractionResult, Vec<ChatReply>) {
    let mut replies = Vec::new();
    let mut union: BTreeSet<u32> = BTreeSet::new();
    let mut warnings: Vec<String> = Vec::new();
    let mut any_some = false;
    for (start, end) in windows(doc, cap_chars) {
        let tagged = render_window(doc, start, end);
        let call = user_call(&request.text, &tagged);
        match complete(backend, &call) {
            Ok(reply) => {
                let parsed = parse_reply_inner(&reply.text, doc, doc_index);
                warnings.extend(parsed.warnings);
                if let Some(tags) = parsed.tags {
                    any_some = true;
                    union.extend(tags);
                }
                replies.push(reply);
            }
            Err(e) => {
                warnings.push(format!("extractor call failed: {e}"));
            }
        }
    }
    let tags = if any_some && !union.is_empty() {
        Some(union)
    } else {
        None
    };
    (
        ExtractionResult {
            doc_index,
            tags,
            warnings,
        },
        replies,
    )
}

/// Step 5: one extraction per selected document, results in selection
/// order regardless of completion order. Per-document failures degrade to
/// `None` plus a warning.
pub fn extract_all(
    backend: &dyn ChatBackend,
    request: &InferenceRequest,
    selection: &RankedSelection,
    docs: &[PoolEntry],
    cap_chars: usize,
) -> (Vec<ExtractionResult>, Vec<ChatReply>) {
    use rayon::prelude::*;
    let per_doc: Vec<(ExtractionResult, Vec<ChatReply>)> = selection
        .entries
        .par_iter()
        .map(|e| extract_document(backend, request, &docs[e.doc_index].doc, e.doc_index, cap_chars))
        .collect();
    let mut results = Vec::with_capacity(per_doc.len());
    let mut replies = Vec::new();
    for (r, mut rs) in per_doc {
        results.push(r);
        replies.append(&mut rs);
    }
    (results, replies)
}

/// Step 6: resolve tags per contributing document (selection order) and
/// assemble the enriched prompt.
pub fn merge_and_assemble(
    request: &InferenceRequest,
    docs: &[PoolEntry],
    results: &[ExtractionResult],
) -> EnrichedPrompt {
    let mut blocks = Vec::new();
    let mut total_chars = 0usize;
    for result in results {
        let Some(tags) = &result.tags else { continue };
        let doc = &docs[result.doc_index].doc;
        let ids: Vec<u32> = tags.iter().copied().collect();
        // Tags were validated against this document at parse time.
        let text = resolve_tags(doc, &ids).expect("validated tags resolve");
        total_chars += text.chars().count();
        blocks.push(MergedBlock {
            source_url: doc.url.clone(),
            text,
        });
    }
    EnrichedPrompt {
        request_text: request.text.clone(),
        merged: MergedText {
            blocks,
            total_chars,
        },
        template_version: GENERATION_TEMPLATE_VERSION.to_string(),
    }
}

/// Build an enriched prompt directly from pre-built evidence blocks (used
/// by the baselines).
pub fn prompt_from_blocks(request_text: &str, blocks: Vec<MergedBlock>) -> EnrichedPrompt {
    let total_chars = blocks.iter().map(|b| b.text.chars().count()).sum();
    EnrichedPrompt {
        request_text: request_text.to_string(),
        merged: MergedText {
            blocks,
            total_chars,
        },
        template_version: GENERATION_TEMPLATE_VERSION.to_string(),
    }
}

impl EnrichedPrompt {
    pub fn is_augmented(&self) -> bool {
        !self.merged.blocks.is_empty()
    }

    /// Render the generation call. The evidence section is present iff the
    /// merged text is non-empty.
    pub fn render(&self) -> ChatCall {
        if self.merged.blocks.is_empty() {
            return ChatCall::new(GENERATION_TEMPLATE, self.request_text.clone());
        }
        let mut user = String::new();
        user.push_str("Reference materials:\n\n");
        for block in &self.merged.blocks {
            user.push_str(&format!("Source: {}\n{}\n\n", block.source_url, block.text));
        }
        user.push_str(&format!("Request:\n{}", self.request_text));
        ChatCall::new(GENERATION_TEMPLATE, user)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::make_scripted_backend;
    use chrono::Utc;
    use std::collections::HashMap;

    fn request(text: &str) -> InferenceRequest {
        InferenceRequest::new("r", text, Utc::now()).unwrap()
    }

    fn doc7() -> TaggedDocument {
        TaggedDocument::from_body(
            "https://locks.example/",
            "smart lock roundup",
            "Smart door locks compared. Xiaomi offers app control. \
             Qin General is budget friendly. It runs a year on batteries. \
             Desmann uses a C-grade lock core. Desmann supports fingerprints. \
             Desmann costs 1299 yuan.",
        )
    }

    fn tags(ids: &[u32]) -> Option<BTreeSet<u32>> {
        Some(ids.iter().copied().collect())
    }

    #[test]
    fn prompt_contains_all_tag_pairs() {
        let doc = doc7();
        let call = build_extractor_prompt(&request("Tell me about the Desmann lock"), &doc);
        for i in 1..=7 {
            assert!(call.user_text.contains(&format!("<TAG-{i}>")));
            assert!(call.user_text.contains(&format!("</TAG-{i}>")));
        }
    }

    #[test]
    fn parse_tag_list() {
        let result = parse_extractor_reply("TAG-5,TAG-6,TAG-7", &doc7());
        assert_eq!(result.tags, tags(&[5, 6, 7]));
        assert!(result.warnings.is_empty());
    }

    #[test]
    fn parse_none_variants() {
        for reply in ["None", "none", " NONE \n"] {
            assert_eq!(parse_extractor_reply(reply, &doc7()).tags, None);
        }
    }

    #[test]
    fn out_of_range_dropped_with_warning() {
        let result = parse_extractor_reply("TAG-2, TAG-99", &doc7());
        assert_eq!(result.tags, tags(&[2]));
        assert_eq!(result.warnings.len(), 1);
        assert!(result.warnings[0].contains("99"));
    }

    #[test]
    fn bare_integers_accepted() {
        let result = parse_extractor_reply("5, 6 and 7", &doc7());
        assert_eq!(result.tags, tags(&[5, 6, 7]));
    }

    #[test]
    fn garbage_degrades_to_none() {
        let result = parse_extractor_reply("the relevant passage is about locks", &doc7());
        assert_eq!(result.tags, None);
        assert!(!result.warnings.is_empty());
    }

    #[test]
    fn all_out_of_range_degrades_to_none() {
        let result = parse_extractor_reply("TAG-99", &doc7());
        assert_eq!(result.tags, None);
        assert!(!result.warnings.is_empty());
    }

    #[test]
    fn windowing_unions_tag_sets() {
        let doc = doc7();
        let req = request("Desmann lock");
        // Cap small enough to force several windows.
        let cap = 120;
        let wins = windows(&doc, cap);
        assert!(wins.len() > 1, "expected multiple windows, got {wins:?}");
        // Mock replies per window: any window containing tags 5..7 returns
        // them, others return None.
        let mut fixtures = HashMap::new();
        for (start, end) in &wins {
            let tagged = render_window(&doc, *start, *end);
            let call = user_call(&req.text, &tagged);
            let in_window: Vec<u32> = (5u32..=7)
                .filter(|t| (*t as usize) > *start && (*t as usize) <= *end)
                .collect();
            let reply = if in_window.is_empty() {
                "None".to_string()
            } else {
                in_window
                    .iter()
                    .map(|t| format!("TAG-{t}"))
                    .collect::<Vec<_>>()
                    .join(",")
            };
            fixtures.insert(call.user_text, reply);
        }
        let backend = make_scripted_backend(fixtures);
        let (result, _) = extract_document(&backend, &req, &doc, 0, cap);
        assert_eq!(result.tags, tags(&[5, 6, 7]));

        // Oracle: whole-document extraction with a consistent mock equals
        // the union over windows.
        let mut whole = HashMap::new();
        whole.insert(
            build_extractor_prompt(&req, &doc).user_text,
            "TAG-5,TAG-6,TAG-7".to_string(),
        );
        let whole_backend = make_scripted_backend(whole);
        let (whole_result, _) =
            extract_document(&whole_backend, &req, &doc, 0, DEFAULT_WINDOW_CAP_CHARS);
        assert_eq!(whole_result.tags, result.tags);
    }

    fn pool(docs: Vec<TaggedDocument>) -> Vec<PoolEntry> {
        docs.into_iter()
            .enumerate()
            .map(|(i, doc)| PoolEntry {
                doc,
                source_list: crate::search::SourceList::Main,
                engine_rank: i as u32 + 1,
            })
            .collect()
    }

    fn selection_of(indices: &[usize]) -> RankedSelection {
        RankedSelection {
            entries: indices
                .iter()
                .map(|&doc_index| crate::reranker::RankedEntry {
                    doc_index,
                    best_score: 0.5,
                    winning_granularity: crate::reranker::Granularity::Full,
                })
                .collect(),
        }
    }

    #[test]
    fn extract_all_preserves_selection_order() {
        let req = request("q");
        let docs = pool(vec![
            TaggedDocument::from_body("https://a.example/", "sa", "Alpha one. Alpha two."),
            TaggedDocument::from_body("https://b.example/", "sb", "Beta one. Beta two."),
            TaggedDocument::from_body("https://c.example/", "sc", "Gamma one. Gamma two."),
        ]);
        let mut fixtures = HashMap::new();
        for (i, reply) in [(0usize, "TAG-1"), (1, "None"), (2, "TAG-2")] {
            let call = build_extractor_prompt(&req, &docs[i].doc);
            fixtures.insert(call.user_text, reply.to_string());
        }
        let backend = make_scripted_backend(fixtures);
        // Selection order deliberately not doc order.
        let selection = selection_of(&[2, 0, 1]);
        let (results, _) = extract_all(&backend, &req, &selection, &docs, DEFAULT_WINDOW_CAP_CHARS);
        assert_eq!(
            results.iter().map(|r| r.doc_index).collect::<Vec<_>>(),
            vec![2, 0, 1]
        );
        let contributing = results.iter().filter(|r| r.tags.is_some()).count();
        assert_eq!(contributing, 2);
    }

    #[test]
    fn merge_empty_results_gives_bare_prompt() {
        let req = request("just chat");
        let prompt = merge_and_assemble(&req, &[], &[]);
        assert!(!prompt.is_augmented());
        let call = prompt.render();
        assert_eq!(call.user_text, "just chat");
        assert!(!call.user_text.contains("Reference materials"));
    }

    #[test]
    fn merge_two_blocks_in_selection_order() {
        let req = request("q");
        let docs = pool(vec![
            TaggedDocument::from_body("https://a.example/", "sa", "Alpha one. Alpha two."),
            TaggedDocument::from_body("https://b.example/", "sb", "Beta one. Beta two."),
        ]);
        let results = vec![
            ExtractionResult {
                doc_index: 1,
                tags: tags(&[1]),
                warnings: vec![],
            },
            ExtractionResult {
                doc_index: 0,
                tags: tags(&[2]),
                warnings: vec![],
            },
        ];
        let prompt = merge_and_assemble(&req, &docs, &results);
        assert_eq!(prompt.merged.blocks.len(), 2);
        assert_eq!(prompt.merged.blocks[0].source_url, "https://b.example/");
        assert_eq!(prompt.merged.blocks[0].text, "Beta one.");
        assert_eq!(prompt.merged.blocks[1].source_url, "https://a.example/");
        assert_eq!(prompt.merged.blocks[1].text, "Alpha two.");
        let rendered = prompt.render();
        assert!(rendered.user_text.contains("Source: https://b.example/"));
    }

    #[test]
    fn all_tags_block_equals_full_text() {
        let req = request("q");
        let docs = pool(vec![doc7()]);
        let all: Vec<u32> = (1..=docs[0].doc.tag_count()).collect();
        let results = vec![ExtractionResult {
            doc_index: 0,
            tags: tags(&all),
            warnings: vec![],
        }];
        let prompt = merge_and_assemble(&req, &docs, &results);
        assert_eq!(prompt.merged.blocks[0].text, docs[0].doc.full_text());
    }

    #[test]
    fn subset_law_merged_never_exceeds_bodies() {
        let req = request("q");
        let docs = pool(vec![doc7()]);
        let results = vec![ExtractionResult {
            doc_index: 0,
            tags: tags(&[5, 6]),
            warnings: vec![],
        }];
        let prompt = merge_and_assemble(&req, &docs, &results);
        assert!(prompt.merged.total_chars <= docs[0].doc.full_text().chars().count());
    }

    #[test]
    fn reply_length_independent_of_segment_text() {
        // Tag replies are O(m * digits(m)), regardless of segment length.
        let long_body = (1..=9)
            .map(|i| format!("Sentence number {i} with plenty of extra words repeated {}.", "x ".repeat(50)))
            .collect::<Vec<_>>()
            .join(" ");
        let doc = TaggedDocument::from_body("u", "s", &long_body);
        let m = doc.tag_count();
        let full_reply = (1..=m).map(|i| format!("TAG-{i}")).collect::<Vec<_>>().join(",");
        assert!(full_reply.len() <= (m as usize) * (2 + 4 + 2));
        let parsed = parse_extractor_reply(&full_reply, &doc);
        assert_eq!(parsed.tags.unwrap().len(), m as usize);
    }
}
