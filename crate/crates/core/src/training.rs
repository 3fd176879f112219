//! Training-file construction: instruction records with robustness
//! filters (short-content removal, double-seed consistency, None-ratio
//! enforcement) and preference-pair records built by perturbing one
//! document's extraction and judging the resulting responses.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extractor::{extract_document, prompt_from_blocks, MergedBlock, DEFAULT_WINDOW_CAP_CHARS};
use crate::eval::JUDGE_SINGLE_TEMPLATE;
use crate::gateway::{complete, ChatBackend, ChatCall, GatewayError};
use crate::parser::InferenceRequest;
use crate::segmenter::{render_tagged, resolve_tags, TaggedDocument};
use crate::tokenizer::Tokenizer;

pub const INSTRUCTION_SCHEMA: &str = "zerodex.instruction.v1";
pub const PREFERENCE_SCHEMA: &str = "zerodex.preference.v1";
pub const DEFAULT_MIN_TOKENS: usize = 100;
pub const DEFAULT_NONE_TARGET: f64 = 0.05;
pub const DEFAULT_NONE_TOLERANCE: f64 = 0.005;
pub const DEFAULT_DPO_ROUNDS: usize = 2;

const ANNOTATION_TEMPLATE: &str = "You will be given a user request and a web page whose sentences are \
wrapped in numbered <TAG-i> markers. Identify every tagged unit relevant to the request and reply \
with a JSON array of objects, each {\"summary\": <one-line summary>, \"tags\": [<tag numbers>]}. \
If nothing is relevant, reply with the single word None.";

/// One request paired with one tagged page body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawPair {
    pub request_text: String,
    pub tagged_content: TaggedDocument,
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub summary: String,
    pub tags: BTreeSet<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionA {
    #[serde(default = "instruction_schema")]
    pub schema: String,
    pub request_text: String,
    pub tagged_content: TaggedDocument,
    pub annotations: Vec<Annotation>,
    pub is_none: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionB {
    #[serde(default = "instruction_schema")]
    pub schema: String,
    pub request_text: String,
    pub tagged_content: TaggedDocument,
    pub tag_sets: Vec<BTreeSet<u32>>,
    pub is_none: bool,
}

fn instruction_schema() -> String {
    INSTRUCTION_SCHEMA.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    #[serde(default = "preference_schema")]
    pub schema: String,
    pub request_text: String,
    pub tagged_content: TaggedDocument,
    pub y_plus: Option<BTreeSet<u32>>,
    pub y_minus: Option<BTreeSet<u32>>,
    pub score_plus: u32,
    pub score_minus: u32,
}

fn preference_schema() -> String {
    PREFERENCE_SCHEMA.to_string()
}

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("cannot reach a None ratio of {target}: {reason}")]
    Infeasible { target: f64, reason: String },
    #[error("gateway: {0}")]
    Gateway(#[from] GatewayError),
    #[error("invalid input: {0}")]
    Invalid(String),
}

// --- Instruction set construction ---

/// One request with all the pages its search run produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RequestLogEntry {
    pub request_text: String,
    pub pages: Vec<TaggedDocument>,
}

/// Uniformly sample `per_request` pages per request without replacement,
/// clamped to what each request has. Seeded, so batches are reproducible.
pub fn sample_raw(
    log: &[RequestLogEntry],
    per_request: usize,
    seed: u64,
    tokenizer: &dyn Tokenizer,
) -> Vec<RawPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for entry in log {
        let mut indices: Vec<usize> = (0..entry.pages.len()).collect();
        indices.shuffle(&mut rng);
        indices.truncate(per_request);
        indices.sort_unstable();
        for i in indices {
            let doc = entry.pages[i].clone();
            let token_count = tokenizer.count(&doc.full_text());
            out.push(RawPair {
                request_text: entry.request_text.clone(),
                tagged_content: doc,
                token_count,
            });
        }
    }
    out
}

/// Drop pairs whose content is strictly under `min_tokens`; returns the
/// survivors and the removal count.
pub fn filter_short(pairs: Vec<RawPair>, min_tokens: usize) -> (Vec<RawPair>, usize) {
    let before = pairs.len();
    let kept: Vec<RawPair> = pairs
        .into_iter()
        .filter(|p| p.token_count >= min_tokens)
        .collect();
    let removed = before - kept.len();
    (kept, removed)
}

/// Outcome of the double-seed annotation check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Annotated {
    Kept(InstructionA),
    Rejected { reason: String, raw_replies: Vec<String> },
}

fn annotation_call(pair: &RawPair, seed: u64) -> ChatCall {
    let user = format!(
        "Request:\n{}\n\nTagged content:\n{}",
        pair.request_text,
        render_tagged(&pair.tagged_content)
    );
    ChatCall::new(ANNOTATION_TEMPLATE, user).with_seed(seed)
}

fn strip_fences(text: &str) -> &str {
    let t = text.trim();
    let t = t.strip_prefix("```json").or_else(|| t.strip_prefix("```")).unwrap_or(t);
    t.strip_suffix("```").unwrap_or(t).trim()
}

#[derive(Deserialize)]
struct WireAnnotation {
    summary: String,
    tags: Vec<u32>,
}

fn parse_annotation_reply(text: &str, doc: &TaggedDocument) -> Result<Vec<Annotation>, String> {
    let body = strip_fences(text);
    if body.eq_ignore_ascii_case("none") {
        return Ok(Vec::new());
    }
    let wire: Vec<WireAnnotation> =
        serde_json::from_str(body).map_err(|e| format!("bad annotation JSON: {e}"))?;
    let max = doc.tag_count();
    let mut out = Vec::with_capacity(wire.len());
    for w in wire {
        let tags: BTreeSet<u32> = w.tags.into_iter().collect();
        if tags.is_empty() {
            return Err("annotation with empty tag list".to_string());
        }
        if let Some(&bad) = tags.iter().find(|&&t| t == 0 || t > max) {
            return Err(format!("tag {bad} out of range (doc has {max})"));
        }
        out.push(Annotation {
            summary: w.summary,
            tags,
        });
    }
    Ok(out)
}

fn tag_sets(annotations: &[Annotation]) -> Vec<BTreeSet<u32>> {
    let mut sets: Vec<BTreeSet<u32>> = annotations.iter().map(|a| a.tags.clone()).collect();
    sets.sort();
    sets
}

/// Annotate one pair twice with distinct seeds. The runs are consistent
/// when their tag-id sets are equal (summary wording is free text and is
/// excluded from the comparison); inconsistent runs are rejected with both
/// raw replies archived.
pub fn annotate(backend: &dyn ChatBackend, pair: &RawPair, seeds: (u64, u64)) -> Annotated {
    debug_assert_ne!(seeds.0, seeds.1, "double-seed check needs distinct seeds");
    let replies: Result<Vec<_>, _> = [seeds.0, seeds.1]
        .iter()
        .map(|&s| complete(backend, &annotation_call(pair, s)))
        .collect();
    let replies = match replies {
        Ok(r) => r,
        Err(e) => {
            return Annotated::Rejected {
                reason: format!("transport: {e}"),
                raw_replies: Vec::new(),
            }
        }
    };
    let raw: Vec<String> = replies.iter().map(|r| r.text.clone()).collect();
    let parsed: Result<Vec<_>, String> = raw
        .iter()
        .map(|t| parse_annotation_reply(t, &pair.tagged_content))
        .collect();
    let parsed = match parsed {
        Ok(p) => p,
        Err(reason) => {
            return Annotated::Rejected {
                reason,
                raw_replies: raw,
            }
        }
    };
    if tag_sets(&parsed[0]) != tag_sets(&parsed[1]) {
        return Annotated::Rejected {
            reason: "contradictory tag sets across seeds".to_string(),
            raw_replies: raw,
        };
    }
    let annotations = parsed.into_iter().next().unwrap();
    let is_none = annotations.is_empty();
    Annotated::Kept(InstructionA {
        schema: INSTRUCTION_SCHEMA.to_string(),
        request_text: pair.request_text.clone(),
        tagged_content: pair.tagged_content.clone(),
        annotations,
        is_none,
    })
}

/// Project an A record to its B form: tags only, summaries dropped.
pub fn derive_instruction_b(a: &InstructionA) -> InstructionB {
    InstructionB {
        schema: INSTRUCTION_SCHEMA.to_string(),
        request_text: a.request_text.clone(),
        tagged_content: a.tagged_content.clone(),
        tag_sets: a.annotations.iter().map(|ann| ann.tags.clone()).collect(),
        is_none: a.is_none,
    }
}

/// Seeded symmetric downsampling until the None fraction lands inside
/// `target ± tolerance`. Keeps relative order of the survivors.
pub fn enforce_none_ratio(
    instructions: Vec<InstructionA>,
    target: f64,
    tolerance: f64,
    seed: u64,
) -> Result<(Vec<InstructionA>, f64), TrainingError> {
    assert!(target > 0.0 && target < 1.0);
    let none_count = instructions.iter().filter(|i| i.is_none).count();
    let non_count = instructions.len() - none_count;
    if none_count == 0 {
        return Err(TrainingError::Infeasible {
            target,
            reason: "no None records to balance with".to_string(),
        });
    }
    if non_count == 0 {
        return Err(TrainingError::Infeasible {
            target,
            reason: "no non-None records to balance with".to_string(),
        });
    }
    let current = none_count as f64 / instructions.len() as f64;
    let (keep_none, keep_non) = if current > target {
        // Largest k with k/(k + non) <= target.
        let k = ((target * non_count as f64) / (1.0 - target)).floor() as usize;
        (k.max(1), non_count)
    } else {
        // Largest m with none/(none + m) >= target - small slack.
        let m = ((none_count as f64 * (1.0 - target)) / target).floor() as usize;
        (none_count, m.max(1))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut none_keep = pick_indices(&instructions, true, keep_none, &mut rng);
    let mut non_keep = pick_indices(&instructions, false, keep_non, &mut rng);
    none_keep.append(&mut non_keep);
    none_keep.sort_unstable();
    let kept: Vec<InstructionA> = {
        let keep: std::collections::BTreeSet<usize> = none_keep.into_iter().collect();
        instructions
            .into_iter()
            .enumerate()
            .filter(|(i, _)| keep.contains(i))
            .map(|(_, v)| v)
            .collect()
    };
    let final_ratio = kept.iter().filter(|i| i.is_none).count() as f64 / kept.len() as f64;
    if (final_ratio - target).abs() > tolerance {
        return Err(TrainingError::Infeasible {
            target,
            reason: format!("achievable ratio {final_ratio:.4} is outside the tolerance"),
        });
    }
    Ok((kept, final_ratio))
}

fn pick_indices(
    instructions: &[InstructionA],
    want_none: bool,
    keep: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut idx: Vec<usize> = instructions
        .iter()
        .enumerate()
        .filter(|(_, i)| i.is_none == want_none)
        .map(|(i, _)| i)
        .collect();
    idx.shuffle(rng);
    idx.truncate(keep);
    idx
}

/// Summary written alongside the instruction files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrepManifest {
    pub seed: u64,
    pub sampled: usize,
    pub filtered_short: usize,
    pub rejected_contradictory: usize,
    pub kept: usize,
    pub final_none_ratio: f64,
}

// --- DPO preference pairs ---

/// Archived evidence for one preference round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DpoRoundTrace {
    pub round: usize,
    pub doc_index: usize,
    /// Per-document tag sets behind the reference response.
    pub evidence_ref: Vec<Option<BTreeSet<u32>>>,
    /// Per-document tag sets behind the perturbed response.
    pub evidence_alt: Vec<Option<BTreeSet<u32>>>,
    pub response_ref: String,
    pub response_alt: String,
    pub score_ref: Option<u32>,
    pub score_alt: Option<u32>,
    pub discarded: Option<String>,
}

fn single_judge_call(request: &str, response: &str) -> ChatCall {
    let user = format!("[User request]\n{request}\n\n[Assistant's response]\n{response}");
    ChatCall::new(JUDGE_SINGLE_TEMPLATE, user)
}

/// Pull the integer out of a `Rating: [[N]]` grading reply.
pub fn parse_rating(text: &str) -> Result<u32, TrainingError> {
    let open = text
        .rfind("[[")
        .ok_or_else(|| TrainingError::Invalid(format!("no rating marker in {text:?}")))?;
    let rest = &text[open + 2..];
    let close = rest
        .find("]]")
        .ok_or_else(|| TrainingError::Invalid(format!("unterminated rating in {text:?}")))?;
    rest[..close]
        .trim()
        .parse::<u32>()
        .map_err(|_| TrainingError::Invalid(format!("non-integer rating in {text:?}")))
}

fn assemble_and_generate(
    generator: &dyn ChatBackend,
    request_text: &str,
    docs: &[TaggedDocument],
    evidence: &[Option<BTreeSet<u32>>],
) -> Result<String, TrainingError> {
    let mut blocks = Vec::new();
    for (doc, tags) in docs.iter().zip(evidence) {
        if let Some(tags) = tags {
            let ids: Vec<u32> = tags.iter().copied().collect();
            let text = resolve_tags(doc, &ids).map_err(|e| TrainingError::Invalid(e.to_string()))?;
            blocks.push(MergedBlock {
                source_url: doc.url.clone(),
                text,
            });
        }
    }
    let prompt = prompt_from_blocks(request_text, blocks);
    Ok(complete(generator, &prompt.render())?.text)
}

/// Build preference records for one request: extract everything with the
/// reference extractor, then per round perturb a single document's
/// extraction with the alternative extractor, grade both responses
/// independently, and keep the winner's tag set as `y_plus`. Ties and
/// identical tag sets discard the round; other rounds proceed.
pub fn dpo_build(
    request_text: &str,
    docs: &[TaggedDocument],
    ref_extractor: &dyn ChatBackend,
    alt_extractor: &dyn ChatBackend,
    generator: &dyn ChatBackend,
    judge: &dyn ChatBackend,
    rounds: usize,
    seed: u64,
) -> Result<(Vec<PreferenceRecord>, Vec<DpoRoundTrace>), TrainingError> {
    if docs.is_empty() {
        return Err(TrainingError::Invalid("dpo_build needs at least one document".into()));
    }
    let request = InferenceRequest::new("dpo", request_text, chrono::Utc::now())
        .map_err(|e| TrainingError::Invalid(e.to_string()))?;

    // Step 1: reference extraction over every document, one response.
    let evidence_ref: Vec<Option<BTreeSet<u32>>> = docs
        .iter()
        .enumerate()
        .map(|(i, d)| extract_document(ref_extractor, &request, d, i, DEFAULT_WINDOW_CAP_CHARS).0.tags)
        .collect();
    let response_ref = assemble_and_generate(generator, request_text, docs, &evidence_ref)?;

    // Seeded doc choice, distinct across rounds when possible.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.shuffle(&mut rng);
    let pick = |round: usize, rng: &mut ChaCha8Rng| -> usize {
        if round < order.len() {
            order[round]
        } else {
            rng.gen_range(0..docs.len())
        }
    };

    let mut records = Vec::new();
    let mut traces = Vec::new();
    for round in 0..rounds {
        let doc_index = pick(round, &mut rng);
        // Step 2: re-extract exactly one document with the alternative.
        let alt_tags = extract_document(
            alt_extractor,
            &request,
            &docs[doc_index],
            doc_index,
            DEFAULT_WINDOW_CAP_CHARS,
        )
        .0
        .tags;
        let mut evidence_alt = evidence_ref.clone();
        evidence_alt[doc_index] = alt_tags.clone();

        let mut trace = DpoRoundTrace {
            round,
            doc_index,
            evidence_ref: evidence_ref.clone(),
            evidence_alt: evidence_alt.clone(),
            response_ref: response_ref.clone(),
            response_alt: String::new(),
            score_ref: None,
            score_alt: None,
            discarded: None,
        };

        if alt_tags == evidence_ref[doc_index] {
            trace.discarded = Some("identical tag sets for the chosen document".to_string());
            traces.push(trace);
            continue;
        }

        let round_result = (|| -> Result<(PreferenceRecord, String, u32, u32), TrainingError> {
            let response_alt =
                assemble_and_generate(generator, request_text, docs, &evidence_alt)?;
            // Step 3: independent single-answer grading of both responses.
            let score_ref =
                parse_rating(&complete(judge, &single_judge_call(request_text, &response_ref))?.text)?;
            let score_alt =
                parse_rating(&complete(judge, &single_judge_call(request_text, &response_alt))?.text)?;
            if score_ref == score_alt {
                return Err(TrainingError::Invalid("tie".to_string()));
            }
            // Step 4: the better response's tag set becomes y_plus.
            let (y_plus, y_minus, score_plus, score_minus) = if score_alt > score_ref {
                (alt_tags.clone(), evidence_ref[doc_index].clone(), score_alt, score_ref)
            } else {
                (evidence_ref[doc_index].clone(), alt_tags.clone(), score_ref, score_alt)
            };
            Ok((
                PreferenceRecord {
                    schema: PREFERENCE_SCHEMA.to_string(),
                    request_text: request_text.to_string(),
                    tagged_content: docs[doc_index].clone(),
                    y_plus,
                    y_minus,
                    score_plus,
                    score_minus,
                },
                response_alt,
                score_ref,
                score_alt,
            ))
        })();

        match round_result {
            Ok((record, response_alt, score_ref, score_alt)) => {
                trace.response_alt = response_alt;
                trace.score_ref = Some(score_ref);
                trace.score_alt = Some(score_alt);
                records.push(record);
            }
            Err(e) => {
                trace.discarded = Some(e.to_string());
            }
        }
        traces.push(trace);
    }
    Ok((records, traces))
}
