//! Evaluation apparatus: synthetic needle benchmarks, tag-set metrics,
//! order-swapped pairwise judging with a positional-bias category, the two
//! reference baselines, and suite-level aggregation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extractor::{
    extract_document, prompt_from_blocks, EnrichedPrompt, MergedBlock, DEFAULT_WINDOW_CAP_CHARS,
};
use crate::gateway::{complete, embed, ChatBackend, ChatCall, EmbedBackend, GatewayError};
use crate::parser::InferenceRequest;
use crate::segmenter::{normalize, TaggedDocument};

pub const CASE_SCHEMA: &str = "zerodex.case.v1";
pub const RESULT_SCHEMA: &str = "zerodex.result.v1";
pub const JUDGE_PAIRWISE_TEMPLATE: &str = include_str!("../templates/judge_pairwise_v1.txt");
pub const JUDGE_SINGLE_TEMPLATE: &str = include_str!("../templates/judge_single_v1.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaseCategory {
    Base,
    Reasoning,
    MultiQuestion,
    MultiAnswer,
    RealWorld,
}

/// One evaluation case: a request plus tagged documents with per-document
/// gold tag sets (`None` marks a document with nothing relevant).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkCase {
    #[serde(default = "case_schema")]
    pub schema: String,
    pub id: String,
    pub request_text: String,
    pub docs: Vec<TaggedDocument>,
    pub gold: Vec<Option<BTreeSet<u32>>>,
    pub category: CaseCategory,
}

fn case_schema() -> String {
    CASE_SCHEMA.to_string()
}

impl BenchmarkCase {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.docs.len() != self.gold.len() {
            return Err(EvalError::BadCase(format!(
                "case {}: {} docs but {} gold entries",
                self.id,
                self.docs.len(),
                self.gold.len()
            )));
        }
        for (doc, gold) in self.docs.iter().zip(&self.gold) {
            if let Some(tags) = gold {
                for &t in tags {
                    if t == 0 || t > doc.tag_count() {
                        return Err(EvalError::BadCase(format!(
                            "case {}: gold tag {t} out of range for {}",
                            self.id, doc.url
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// A needle recipe: sentences to plant and the questions they answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedleSpec {
    pub category: CaseCategory,
    pub needles: Vec<String>,
    pub questions: Vec<NeedleQuestion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedleQuestion {
    pub question: String,
    /// Indices into `needles` answering this question.
    pub needle_indices: Vec<usize>,
}

impl NeedleSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.needles.is_empty() || self.questions.is_empty() {
            return Err(EvalError::BadCase("needle spec needs needles and questions".into()));
        }
        for q in &self.questions {
            if q.needle_indices.iter().any(|&i| i >= self.needles.len()) {
                return Err(EvalError::BadCase("needle index out of range".into()));
            }
        }
        if self.category == CaseCategory::MultiAnswer {
            let gold: BTreeSet<usize> = self
                .questions
                .iter()
                .flat_map(|q| q.needle_indices.iter().copied())
                .collect();
            if gold.len() < 2 {
                return Err(EvalError::BadCase(
                    "multi-answer spec needs at least 2 gold needles".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TagSetScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub exact_match: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerdictOutcome {
    Win,
    Tie,
    Lose,
    Pbia,
}

/// Raw per-call verdict, in the letter space of that call's ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RawVerdict {
    A,
    B,
    C,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub outcome: VerdictOutcome,
    /// Verdict from the (A, B) ordering.
    pub first_order: RawVerdict,
    /// Verdict from the (B, A) ordering, in that call's own letters.
    pub second_order: RawVerdict,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("haystack too small: needed {needed} chars, corpus has {available}")]
    HaystackTooSmall { needed: usize, available: usize },
    #[error("malformed case: {0}")]
    BadCase(String),
    #[error("no judge backend configured")]
    NoJudge,
    #[error("unparseable judge verdict: {0:?}")]
    BadVerdict(String),
    #[error("gateway: {0}")]
    Gateway(#[from] GatewayError),
    #[error("unsupported input record: {0}")]
    BadFormat(String),
}

// --- Synthetic needle benchmark ---

/// Build needle-in-a-haystack cases: for every (spec, length, depth) cell,
/// filler is trimmed to the length budget, needles are planted at the
/// depth anchor (spread evenly when there are several), and gold tags are
/// recovered by exact text match after segmentation.
pub fn generate_synthetic(
    haystack: &[String],
    needles: &[NeedleSpec],
    context_lengths: &[usize],
    depths: &[f64],
) -> Result<Vec<BenchmarkCase>, EvalError> {
    let available: usize = haystack.iter().map(|s| s.chars().count() + 1).sum();
    if let Some(&max_len) = context_lengths.iter().max() {
        if available < max_len {
            return Err(EvalError::HaystackTooSmall {
                needed: max_len,
                available,
            });
        }
    }
    let mut cases = Vec::new();
    for (spec_idx, spec) in needles.iter().enumerate() {
        spec.validate()?;
        for &length in context_lengths {
            for &depth in depths {
                cases.push(build_case(spec, spec_idx, haystack, length, depth)?);
            }
        }
    }
    Ok(cases)
}

fn build_case(
    spec: &NeedleSpec,
    spec_idx: usize,
    haystack: &[String],
    length: usize,
    depth: f64,
) -> Result<BenchmarkCase, EvalError> {
    // Trim filler to the character budget.
    let mut filler: Vec<&str> = Vec::new();
    let mut chars = 0usize;
    for s in haystack {
        if chars >= length {
            break;
        }
        filler.push(s.as_str());
        chars += s.chars().count() + 1;
    }
    if chars < length {
        return Err(EvalError::HaystackTooSmall {
            needed: length,
            available: chars,
        });
    }

    // Plant needles: anchor at floor(depth * n_filler), extra needles
    // spread evenly between the anchor and the end.
    let n_filler = filler.len();
    let depth = depth.clamp(0.0, 1.0);
    let anchor = (depth * n_filler as f64).floor() as usize;
    let k = spec.needles.len();
    let span = n_filler.saturating_sub(anchor);
    let mut sentences: Vec<&str> = filler;
    for (j, needle) in spec.needles.iter().enumerate().rev() {
        let pos = (anchor + j * span / k).min(sentences.len());
        sentences.insert(pos, needle.as_str());
    }

    let body = sentences.join(" ");
    let doc = TaggedDocument::from_body(
        format!("synthetic://needle/{spec_idx}/{length}/{depth}"),
        "",
        &body,
    );

    // Recover gold tags by exact text match on the segmented document.
    let mut gold: BTreeSet<u32> = BTreeSet::new();
    for needle in &spec.needles {
        let want = normalize(needle);
        let matched: Vec<u32> = doc
            .segments
            .iter()
            .filter(|s| s.text == want)
            .map(|s| s.tag_id)
            .collect();
        if matched.is_empty() {
            return Err(EvalError::BadCase(format!(
                "needle did not survive segmentation intact: {needle:?}"
            )));
        }
        gold.extend(matched);
    }

    let request_text = spec
        .questions
        .iter()
        .map(|q| q.question.as_str())
        .collect::<Vec<_>>()
        .join(" ");

    let case = BenchmarkCase {
        schema: CASE_SCHEMA.to_string(),
        id: format!("synth-{spec_idx}-{length}-{depth}"),
        request_text,
        docs: vec![doc],
        gold: vec![Some(gold)],
        category: spec.category,
    };
    case.validate()?;
    Ok(case)
}

// --- Metrics ---

/// Score one predicted tag set against gold. `None` behaves as the empty
/// set, except that None-against-None is scored as perfect: the metric
/// must reward correctly reporting that nothing is relevant.
pub fn score_tags(pred: Option<&BTreeSet<u32>>, gold: Option<&BTreeSet<u32>>) -> TagSetScore {
    let exact_match = match (pred, gold) {
        (None, None) => true,
        (Some(p), Some(g)) => p == g,
        _ => false,
    };
    if pred.is_none() && gold.is_none() {
        return TagSetScore {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
            exact_match,
        };
    }
    let empty = BTreeSet::new();
    let p = pred.unwrap_or(&empty);
    let g = gold.unwrap_or(&empty);
    let tp = p.intersection(g).count() as f64;
    let precision = if p.is_empty() { 0.0 } else { tp / p.len() as f64 };
    let recall = if g.is_empty() { 0.0 } else { tp / g.len() as f64 };
    TagSetScore {
        precision,
        recall,
        f1: harmonic_f1(precision, recall),
        exact_match,
    }
}

/// F1 = 2PR/(P+R), 0 when both rates are 0.
pub fn harmonic_f1(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub em_ratio: f64,
}

/// Micro-averaged corpus metrics over (pred, gold) pairs: P and R from
/// summed confusion counts, F1 as their harmonic mean, EM as a fraction.
/// None-against-None pairs count as exact matches and contribute nothing
/// to the confusion sums.
pub fn aggregate_scores(
    pairs: &[(Option<BTreeSet<u32>>, Option<BTreeSet<u32>>)],
) -> Option<CorpusScore> {
    if pairs.is_empty() {
        return None;
    }
    let empty = BTreeSet::new();
    let mut tp = 0usize;
    let mut pred_total = 0usize;
    let mut gold_total = 0usize;
    let mut em = 0usize;
    let mut confusion_pairs = 0usize;
    for (pred, gold) in pairs {
        let score = score_tags(pred.as_ref(), gold.as_ref());
        if score.exact_match {
            em += 1;
        }
        if pred.is_none() && gold.is_none() {
            continue;
        }
        confusion_pairs += 1;
        let p = pred.as_ref().unwrap_or(&empty);
        let g = gold.as_ref().unwrap_or(&empty);
        tp += p.intersection(g).count();
        pred_total += p.len();
        gold_total += g.len();
    }
    let (precision, recall) = if confusion_pairs == 0 {
        // Corpus is all correctly-reported-None; perfect by convention.
        (1.0, 1.0)
    } else {
        (
            if pred_total > 0 { tp as f64 / pred_total as f64 } else { 0.0 },
            if gold_total > 0 { tp as f64 / gold_total as f64 } else { 0.0 },
        )
    };
    Some(CorpusScore {
        precision,
        recall,
        f1: harmonic_f1(precision, recall),
        em_ratio: em as f64 / pairs.len() as f64,
    })
}

// --- Pairwise judging ---

fn judge_call(request: &str, first: &str, second: &str) -> ChatCall {
    let user = format!(
        "[User request]\n{request}\n\n[Assistant A's response]\n{first}\n\n[Assistant B's response]\n{second}"
    );
    ChatCall::new(JUDGE_PAIRWISE_TEMPLATE, user)
}

/// Pull the last `[[A]]`/`[[B]]`/`[[C]]` marker out of a judge reply.
pub fn parse_pairwise_verdict(text: &str) -> Result<RawVerdict, EvalError> {
    let mut found = None;
    for (marker, verdict) in [
        ("[[A]]", RawVerdict::A),
        ("[[B]]", RawVerdict::B),
        ("[[C]]", RawVerdict::C),
    ] {
        if let Some(pos) = text.rfind(marker) {
            match found {
                Some((best, _)) if best >= pos => {}
                _ => found = Some((pos, verdict)),
            }
        }
    }
    found
        .map(|(_, v)| v)
        .ok_or_else(|| EvalError::BadVerdict(text.chars().take(120).collect()))
}

/// Judge a response pair in both orders. Agreement yields WIN/TIE/LOSE
/// from A's perspective; disagreement is the positional-bias category.
pub fn judge_pair(
    judge: &dyn ChatBackend,
    request: &str,
    response_a: &str,
    response_b: &str,
) -> Result<JudgeVerdict, EvalError> {
    if response_a.trim().is_empty() || response_b.trim().is_empty() {
        return Err(EvalError::BadCase("empty response in judged pair".into()));
    }
    let first = parse_pairwise_verdict(&complete(judge, &judge_call(request, response_a, response_b))?.text)?;
    let second = parse_pairwise_verdict(&complete(judge, &judge_call(request, response_b, response_a))?.text)?;
    // Map the swapped call back into A's perspective.
    let second_as_a = match second {
        RawVerdict::A => RawVerdict::B,
        RawVerdict::B => RawVerdict::A,
        RawVerdict::C => RawVerdict::C,
    };
    let outcome = if first == second_as_a {
        match first {
            RawVerdict::A => VerdictOutcome::Win,
            RawVerdict::B => VerdictOutcome::Lose,
            RawVerdict::C => VerdictOutcome::Tie,
        }
    } else {
        VerdictOutcome::Pbia
    };
    Ok(JudgeVerdict {
        outcome,
        first_order: first,
        second_order: second,
    })
}

// --- Baselines ---

/// Every document body, unprocessed, in gather order.
pub fn run_baseline_naive(docs: &[TaggedDocument], request_text: &str) -> EnrichedPrompt {
    let blocks = docs
        .iter()
        .map(|d| MergedBlock {
            source_url: d.url.clone(),
            text: d.full_text(),
        })
        .collect();
    prompt_from_blocks(request_text, blocks)
}

#[derive(Debug, Clone, Copy)]
pub struct VectorParams {
    pub chunk_size: usize,
    pub chunk_overlap: usize,
    pub top_k: usize,
    pub neighbor_num: usize,
}

impl Default for VectorParams {
    fn default() -> Self {
        VectorParams {
            chunk_size: 512,
            chunk_overlap: 128,
            top_k: 12,
            neighbor_num: 1,
        }
    }
}

/// Overlapping token windows over a whitespace tokenization. The window
/// count follows the stride rule `max(1, (L - size) / stride + 1)`; a tail
/// shorter than one stride stays inside the final window's overlap.
pub fn chunk_tokens<'a>(tokens: &[&'a str], size: usize, overlap: usize) -> Vec<Vec<&'a str>> {
    assert!(size > 0 && overlap < size, "overlap must be below chunk size");
    let stride = size - overlap;
    let l = tokens.len();
    let count = if l <= size { 1 } else { (l - size) / stride + 1 };
    (0..count)
        .map(|i| {
            let start = i * stride;
            let end = (start + size).min(l);
            tokens[start..end].to_vec()
        })
        .collect()
}

struct Chunk {
    doc_index: usize,
    chunk_index: usize,
    text: String,
}

/// The conventional chunk-embed-retrieve baseline: fixed token windows,
/// exhaustive cosine ranking, immediate-neighbor expansion, deduped
/// concatenation in score order.
pub fn run_baseline_vector(
    docs: &[TaggedDocument],
    request_text: &str,
    embedder: &dyn EmbedBackend,
    params: &VectorParams,
) -> Result<EnrichedPrompt, EvalError> {
    assert!(params.chunk_size > 0 && params.chunk_overlap < params.chunk_size);
    let mut chunks: Vec<Chunk> = Vec::new();
    let mut per_doc_counts: Vec<usize> = Vec::new();
    for (doc_index, doc) in docs.iter().enumerate() {
        let body = doc.full_text();
        let tokens: Vec<&str> = body.split_whitespace().collect();
        if tokens.is_empty() {
            per_doc_counts.push(0);
            continue;
        }
        let windows = chunk_tokens(&tokens, params.chunk_size, params.chunk_overlap);
        per_doc_counts.push(windows.len());
        for (chunk_index, w) in windows.into_iter().enumerate() {
            chunks.push(Chunk {
                doc_index,
                chunk_index,
                text: w.join(" "),
            });
        }
    }
    if chunks.is_empty() {
        return Ok(prompt_from_blocks(request_text, Vec::new()));
    }

    let query = embed(embedder, request_text)?;
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(chunks.len());
    for (i, c) in chunks.iter().enumerate() {
        let v = embed(embedder, &c.text)?;
        scored.push((query.cosine(&v), i));
    }
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.1.cmp(&b.1))
    });
    scored.truncate(params.top_k);

    // Neighbor expansion in score order, deduped globally.
    let mut used: BTreeSet<usize> = BTreeSet::new();
    let mut blocks: Vec<MergedBlock> = Vec::new();
    for &(_, idx) in &scored {
        let center = &chunks[idx];
        let lo = center.chunk_index.saturating_sub(params.neighbor_num);
        let hi = center.chunk_index + params.neighbor_num;
        let mut parts: Vec<&str> = Vec::new();
        for (i, c) in chunks.iter().enumerate() {
            if c.doc_index == center.doc_index
                && c.chunk_index >= lo
                && c.chunk_index <= hi
                && used.insert(i)
            {
                parts.push(&c.text);
            }
        }
        if !parts.is_empty() {
            blocks.push(MergedBlock {
                source_url: docs[center.doc_index].url.clone(),
                text: parts.join(" "),
            });
        }
    }
    Ok(prompt_from_blocks(request_text, blocks))
}

// --- Suite ---

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemKind {
    Ext,
    Naive,
    Vector,
}

impl std::str::FromStr for SystemKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ext" => Ok(SystemKind::Ext),
            "naive" => Ok(SystemKind::Naive),
            "vector" => Ok(SystemKind::Vector),
            other => Err(format!("unknown system {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictCounts {
    pub win: usize,
    pub tie: usize,
    pub lose: usize,
    pub pbia: usize,
}

impl VerdictCounts {
    pub fn total(&self) -> usize {
        self.win + self.tie + self.lose + self.pbia
    }

    fn add(&mut self, outcome: VerdictOutcome) {
        match outcome {
            VerdictOutcome::Win => self.win += 1,
            VerdictOutcome::Tie => self.tie += 1,
            VerdictOutcome::Lose => self.lose += 1,
            VerdictOutcome::Pbia => self.pbia += 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseResult {
    #[serde(default = "result_schema")]
    pub schema: String,
    pub case_id: String,
    pub pred: Vec<Option<BTreeSet<u32>>>,
    pub scores: Vec<TagSetScore>,
    pub verdict: Option<JudgeVerdict>,
    pub error: Option<String>,
}

fn result_schema() -> String {
    RESULT_SCHEMA.to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteResult {
    pub system: SystemKind,
    pub counts: VerdictCounts,
    pub metrics: Option<CorpusScore>,
    pub cases: Vec<CaseResult>,
    pub failures: usize,
}

/// Run the extractor over one case's documents.
fn extract_case(
    extractor: &dyn ChatBackend,
    case: &BenchmarkCase,
) -> Result<Vec<Option<BTreeSet<u32>>>, EvalError> {
    let request = InferenceRequest::new(case.id.clone(), case.request_text.clone(), chrono::Utc::now())
        .map_err(|e| EvalError::BadCase(e.to_string()))?;
    let mut preds = Vec::with_capacity(case.docs.len());
    for (i, doc) in case.docs.iter().enumerate() {
        let (result, _) = extract_document(extractor, &request, doc, i, DEFAULT_WINDOW_CAP_CHARS);
        preds.push(result.tags);
    }
    Ok(preds)
}

fn extraction_prompt(
    extractor: &dyn ChatBackend,
    case: &BenchmarkCase,
) -> Result<EnrichedPrompt, EvalError> {
    let preds = extract_case(extractor, case)?;
    let mut blocks = Vec::new();
    for (doc, pred) in case.docs.iter().zip(&preds) {
        if let Some(tags) = pred {
            let ids: Vec<u32> = tags.iter().copied().collect();
            let text = crate::segmenter::resolve_tags(doc, &ids)
                .map_err(|e| EvalError::BadCase(e.to_string()))?;
            blocks.push(MergedBlock {
                source_url: doc.url.clone(),
                text,
            });
        }
    }
    Ok(prompt_from_blocks(&case.request_text, blocks))
}

/// Evaluate a suite. `Ext` runs extraction metrics only; the baselines
/// additionally generate both responses and judge the pair (extraction
/// system as A). Per-case failures are recorded and the run continues.
pub fn run_suite(
    system: SystemKind,
    cases: &[BenchmarkCase],
    extractor: &dyn ChatBackend,
    generator: &dyn ChatBackend,
    judge: Option<&dyn ChatBackend>,
    embedder: &dyn EmbedBackend,
    vector_params: &VectorParams,
) -> SuiteResult {
    let mut counts = VerdictCounts::default();
    let mut pairs: Vec<(Option<BTreeSet<u32>>, Option<BTreeSet<u32>>)> = Vec::new();
    let mut case_results = Vec::new();
    let mut failures = 0usize;

    for case in cases {
        let outcome = (|| -> Result<CaseResult, EvalError> {
            case.validate()?;
            let preds = extract_case(extractor, case)?;
            let scores: Vec<TagSetScore> = preds
                .iter()
                .zip(&case.gold)
                .map(|(p, g)| score_tags(p.as_ref(), g.as_ref()))
                .collect();
            for (p, g) in preds.iter().zip(&case.gold) {
                pairs.push((p.clone(), g.clone()));
            }

            let verdict = match system {
                SystemKind::Ext => None,
                SystemKind::Naive | SystemKind::Vector => {
                    let judge = judge.ok_or(EvalError::NoJudge)?;
                    let ext_prompt = extraction_prompt(extractor, case)?;
                    let base_prompt = match system {
                        SystemKind::Naive => run_baseline_naive(&case.docs, &case.request_text),
                        SystemKind::Vector => run_baseline_vector(
                            &case.docs,
                            &case.request_text,
                            embedder,
                            vector_params,
                        )?,
                        SystemKind::Ext => unreachable!(),
                    };
                    let ext_response = complete(generator, &ext_prompt.render())?.text;
                    let base_response = complete(generator, &base_prompt.render())?.text;
                    let v = judge_pair(judge, &case.request_text, &ext_response, &base_response)?;
                    counts.add(v.outcome);
                    Some(v)
                }
            };

            Ok(CaseResult {
                schema: RESULT_SCHEMA.to_string(),
                case_id: case.id.clone(),
                pred: preds,
                scores,
                verdict,
                error: None,
            })
        })();
        match outcome {
            Ok(r) => case_results.push(r),
            Err(e) => {
                failures += 1;
                case_results.push(CaseResult {
                    schema: RESULT_SCHEMA.to_string(),
                    case_id: case.id.clone(),
                    pred: Vec::new(),
                    scores: Vec::new(),
                    verdict: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }

    SuiteResult {
        system,
        counts,
        metrics: aggregate_scores(&pairs),
        cases: case_results,
        failures,
    }
}

// --- Open-source dataset converters ---

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvertFormat {
    /// Multi-hop QA: question, `context` of `[title, [sentences]]` pairs,
    /// `supporting_facts` of `[title, sentence_index]` pairs.
    Multihop,
    /// Multi-question: one document, several questions each pointing at
    /// its evidence sentences.
    Multiple,
    /// Multi-answer ("more than it") retrieval: one document, one
    /// question, two or more evidence sentences.
    Mti,
}

impl std::str::FromStr for ConvertFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "multihop" => Ok(ConvertFormat::Multihop),
            "multiple" => Ok(ConvertFormat::Multiple),
            "mti" => Ok(ConvertFormat::Mti),
            other => Err(format!("unknown convert format {other:?}")),
        }
    }
}

fn gold_from_sentences(doc: &TaggedDocument, sentences: &[String]) -> Result<BTreeSet<u32>, EvalError> {
    let mut gold = BTreeSet::new();
    for s in sentences {
        let want = normalize(s);
        let ids: Vec<u32> = doc
            .segments
            .iter()
            .filter(|seg| seg.text == want)
            .map(|seg| seg.tag_id)
            .collect();
        if ids.is_empty() {
            return Err(EvalError::BadFormat(format!(
                "evidence sentence not found after segmentation: {s:?}"
            )));
        }
        gold.extend(ids);
    }
    Ok(gold)
}

#[derive(Deserialize)]
struct MultihopRecord {
    #[serde(alias = "_id")]
    id: String,
    question: String,
    /// [title, sentences] pairs.
    context: Vec<(String, Vec<String>)>,
    /// [title, sentence_index] pairs.
    supporting_facts: Vec<(String, usize)>,
}

#[derive(Deserialize)]
struct FlatRecord {
    id: String,
    #[serde(alias = "question")]
    questions: serde_json::Value,
    document: String,
    evidence_sentences: Vec<String>,
}

/// Convert one native JSON record into a BenchmarkCase.
pub fn convert_record(format: ConvertFormat, line: &str) -> Result<BenchmarkCase, EvalError> {
    match format {
        ConvertFormat::Multihop => {
            let rec: MultihopRecord =
                serde_json::from_str(line).map_err(|e| EvalError::BadFormat(e.to_string()))?;
            let mut docs = Vec::new();
            let mut gold = Vec::new();
            for (title, sentences) in &rec.context {
                let doc = TaggedDocument::from_body(
                    format!("dataset://multihop/{title}"),
                    "",
                    &sentences.join(" "),
                );
                let supporting: Vec<String> = rec
                    .supporting_facts
                    .iter()
                    .filter(|(t, _)| t == title)
                    .filter_map(|(_, i)| sentences.get(*i).cloned())
                    .collect();
                let g = if supporting.is_empty() {
                    None
                } else {
                    Some(gold_from_sentences(&doc, &supporting)?)
                };
                docs.push(doc);
                gold.push(g);
            }
            let case = BenchmarkCase {
                schema: CASE_SCHEMA.to_string(),
                id: rec.id,
                request_text: rec.question,
                docs,
                gold,
                category: CaseCategory::Reasoning,
            };
            case.validate()?;
            Ok(case)
        }
        ConvertFormat::Multiple | ConvertFormat::Mti => {
            let rec: FlatRecord =
                serde_json::from_str(line).map_err(|e| EvalError::BadFormat(e.to_string()))?;
            let question = match &rec.questions {
                serde_json::Value::String(s) => s.clone(),
                serde_json::Value::Array(items) => items
                    .iter()
                    .filter_map(|v| v.as_str())
                    .collect::<Vec<_>>()
                    .join(" "),
                _ => return Err(EvalError::BadFormat("questions must be string or array".into())),
            };
            let doc = TaggedDocument::from_body(
                format!("dataset://{}/{}", if format == ConvertFormat::Mti { "mti" } else { "multiple" }, rec.id),
                "",
                &rec.document,
            );
            let gold = gold_from_sentences(&doc, &rec.evidence_sentences)?;
            if format == ConvertFormat::Mti && gold.len() < 2 {
                return Err(EvalError::BadFormat(
                    "multi-answer record needs at least 2 evidence sentences".into(),
                ));
            }
            let case = BenchmarkCase {
                schema: CASE_SCHEMA.to_string(),
                id: rec.id,
                request_text: question,
                docs: vec![doc],
                gold: vec![Some(gold)],
                category: if format == ConvertFormat::Mti {
                    CaseCategory::MultiAnswer
                } else {
                    CaseCategory::MultiQuestion
                },
            };
            case.validate()?;
            Ok(case)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::make_scripted_backend;
    use std::collections::HashMap;

    fn set(ids: &[u32]) -> BTreeSet<u32> {
        ids.iter().copied().collect()
    }

    fn filler(n: usize) -> Vec<String> {
        (0..n)
            .map(|i| format!("Filler sentence number {i} talks about nothing in particular."))
            .collect()
    }

    fn spec_one() -> NeedleSpec {
        NeedleSpec {
            category: CaseCategory::Base,
            needles: vec!["The secret launch code is 7741.".to_string()],
            questions: vec![NeedleQuestion {
                question: "What is the secret launch code?".to_string(),
                needle_indices: vec![0],
            }],
        }
    }

    #[test]
    fn score_tags_identity() {
        let s = score_tags(Some(&set(&[2, 5])), Some(&set(&[2, 5])));
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        assert!(s.exact_match);
    }

    #[test]
    fn score_tags_partial_overlap_matches_formula() {
        // Independent oracle: direct confusion-count arithmetic.
        let pred = set(&[1, 2, 3]);
        let gold = set(&[2, 3, 4]);
        let tp = pred.intersection(&gold).count() as f64;
        let p = tp / pred.len() as f64;
        let r = tp / gold.len() as f64;
        let s = score_tags(Some(&pred), Some(&gold));
        assert_eq!(s.precision, p);
        assert_eq!(s.recall, r);
        assert!((s.f1 - 2.0 * p * r / (p + r)).abs() < 1e-12);
        assert!(!s.exact_match);
    }

    #[test]
    fn score_tags_none_cases() {
        let both = score_tags(None, None);
        assert_eq!((both.precision, both.recall, both.f1), (1.0, 1.0, 1.0));
        assert!(both.exact_match);
        let miss = score_tags(None, Some(&set(&[1])));
        assert_eq!((miss.precision, miss.recall, miss.f1), (0.0, 0.0, 0.0));
        assert!(!miss.exact_match);
        let spurious = score_tags(Some(&set(&[1])), None);
        assert_eq!(spurious.precision, 0.0);
        assert!(!spurious.exact_match);
    }

    #[test]
    fn aggregate_reproduces_published_f1_consistency() {
        assert!((harmonic_f1(0.7139, 0.8353) - 0.7698).abs() < 0.0005);
    }

    #[test]
    fn aggregate_micro_counts_match_hand_sums() {
        // Case 1: pred {1,2} gold {2,3}; case 2: pred {5} gold {5,6,7}.
        let pairs = vec![
            (Some(set(&[1, 2])), Some(set(&[2, 3]))),
            (Some(set(&[5])), Some(set(&[5, 6, 7]))),
        ];
        let agg = aggregate_scores(&pairs).unwrap();
        // Hand sums: TP = 1 + 1 = 2, pred = 3, gold = 5.
        assert!((agg.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((agg.recall - 2.0 / 5.0).abs() < 1e-12);
        assert_eq!(agg.em_ratio, 0.0);
    }

    #[test]
    fn aggregate_single_case_equals_case_scores() {
        let pairs = vec![(Some(set(&[1, 2, 3])), Some(set(&[2, 3, 4])))];
        let agg = aggregate_scores(&pairs).unwrap();
        let s = score_tags(Some(&set(&[1, 2, 3])), Some(&set(&[2, 3, 4])));
        assert_eq!(agg.precision, s.precision);
        assert_eq!(agg.recall, s.recall);
        assert_eq!(agg.f1, s.f1);
    }

    #[test]
    fn synthetic_cartesian_count_and_gold_resolve() {
        let cases =
            generate_synthetic(&filler(200), &[spec_one()], &[1000, 4000], &[0.0, 0.5, 1.0])
                .unwrap();
        assert_eq!(cases.len(), 6);
        for case in &cases {
            let gold = case.gold[0].as_ref().unwrap();
            let ids: Vec<u32> = gold.iter().copied().collect();
            let text = crate::segmenter::resolve_tags(&case.docs[0], &ids).unwrap();
            assert_eq!(text, "The secret launch code is 7741.");
        }
    }

    #[test]
    fn synthetic_depth_zero_puts_needle_first() {
        let cases = generate_synthetic(&filler(100), &[spec_one()], &[1000], &[0.0]).unwrap();
        assert_eq!(cases[0].gold[0], Some(set(&[1])));
    }

    #[test]
    fn synthetic_multi_answer_gold_has_three_tags() {
        let spec = NeedleSpec {
            category: CaseCategory::MultiAnswer,
            needles: vec![
                "Alpha base stores 12 crates of supplies.".to_string(),
                "Bravo base stores 9 crates of supplies.".to_string(),
                "Charlie base stores 4 crates of supplies.".to_string(),
            ],
            questions: vec![NeedleQuestion {
                question: "How many crates does each base store?".to_string(),
                needle_indices: vec![0, 1, 2],
            }],
        };
        let cases = generate_synthetic(&filler(200), &[spec], &[2000], &[0.5]).unwrap();
        assert!(cases[0].gold[0].as_ref().unwrap().len() >= 3);
    }

    #[test]
    fn synthetic_haystack_too_small() {
        assert!(matches!(
            generate_synthetic(&filler(2), &[spec_one()], &[100_000], &[0.5]),
            Err(EvalError::HaystackTooSmall { .. })
        ));
    }

    #[test]
    fn judge_pair_position_biased_judge_is_pbia() {
        let judge = make_scripted_backend(HashMap::from([(
            "*".to_string(),
            "The first one reads better. [[A]]".to_string(),
        )]));
        let v = judge_pair(&judge, "q", "left", "right").unwrap();
        assert_eq!(v.outcome, VerdictOutcome::Pbia);
    }

    #[test]
    fn judge_pair_both_ties_is_tie() {
        let judge = make_scripted_backend(HashMap::from([("*".to_string(), "[[C]]".to_string())]));
        let v = judge_pair(&judge, "q", "left", "right").unwrap();
        assert_eq!(v.outcome, VerdictOutcome::Tie);
    }

    #[test]
    fn parse_verdict_takes_last_marker() {
        assert_eq!(
            parse_pairwise_verdict("maybe [[A]], but on balance [[B]]").unwrap(),
            RawVerdict::B
        );
        assert!(parse_pairwise_verdict("no verdict here").is_err());
    }

    #[test]
    fn naive_baseline_concatenates_in_order() {
        let docs = vec![
            TaggedDocument::from_body("https://a.example/", "", "First body."),
            TaggedDocument::from_body("https://b.example/", "", "Second body."),
        ];
        let prompt = run_baseline_naive(&docs, "q");
        assert_eq!(prompt.merged.blocks.len(), 2);
        assert_eq!(prompt.merged.blocks[0].text, "First body.");
        assert_eq!(prompt.merged.blocks[1].text, "Second body.");
    }

    #[test]
    fn chunk_counts_follow_stride_rule() {
        let toks: Vec<String> = (0..900).map(|i| format!("t{i}")).collect();
        let refs: Vec<&str> = toks.iter().map(|s| s.as_str()).collect();
        let chunks = chunk_tokens(&refs, 512, 128);
        assert_eq!(chunks.len(), 2);
        assert_eq!(chunks[0][0], "t0");
        assert_eq!(chunks[1][0], "t384");
        assert_eq!(chunk_tokens(&refs[..512], 512, 128).len(), 1);
        assert_eq!(chunk_tokens(&refs[..3], 512, 128).len(), 1);
    }

    #[test]
    fn vector_baseline_selects_semantically_close_chunk() {
        let embedder = crate::gateway::HashEmbedder::new(128);
        let relevant = "desmann lock pricing ".repeat(200);
        let noise = "gardening soil compost watering ".repeat(200);
        let docs = vec![
            TaggedDocument::from_body("https://noise.example/", "", &noise),
            TaggedDocument::from_body("https://hit.example/", "", &relevant),
        ];
        let params = VectorParams {
            top_k: 1,
            ..VectorParams::default()
        };
        let prompt =
            run_baseline_vector(&docs, "desmann lock pricing", &embedder, &params).unwrap();
        assert_eq!(prompt.merged.blocks[0].source_url, "https://hit.example/");
    }

    #[test]
    fn suite_verdict_conservation() {
        let extractor = make_scripted_backend(HashMap::from([("*".to_string(), "TAG-1".to_string())]));
        let generator = make_scripted_backend(HashMap::from([("*".to_string(), "answer".to_string())]));
        let judge = make_scripted_backend(HashMap::from([("*".to_string(), "[[C]]".to_string())]));
        let embedder = crate::gateway::HashEmbedder::new(64);
        let cases: Vec<BenchmarkCase> =
            generate_synthetic(&filler(100), &[spec_one()], &[800, 1600], &[0.0, 1.0]).unwrap();
        let result = run_suite(
            SystemKind::Naive,
            &cases,
            &extractor,
            &generator,
            Some(&judge),
            &embedder,
            &VectorParams::default(),
        );
        assert_eq!(result.counts.total(), cases.len());
        assert_eq!(result.failures, 0);
    }

    #[test]
    fn convert_multihop_record() {
        let line = r#"{"_id":"case-1","question":"Where was the painter of the mural born?",
            "context":[["Mural",["The mural was painted by Ana Reyes.","It spans two walls."]],
                       ["Ana Reyes",["Ana Reyes was born in Lima.","She studied in Madrid."]]],
            "supporting_facts":[["Mural",0],["Ana Reyes",0]]}"#;
        let compact = line.replace('\n', " ");
        let case = convert_record(ConvertFormat::Multihop, &compact).unwrap();
        assert_eq!(case.docs.len(), 2);
        assert_eq!(case.gold[0], Some(set(&[1])));
        assert_eq!(case.gold[1], Some(set(&[1])));
        assert_eq!(case.category, CaseCategory::Reasoning);
    }

    #[test]
    fn convert_mti_requires_two_evidences() {
        let one = r#"{"id":"m1","question":"Which bases store supplies?",
            "document":"Alpha stores crates. Beta stores nothing.",
            "evidence_sentences":["Alpha stores crates."]}"#
            .replace('\n', " ");
        assert!(convert_record(ConvertFormat::Mti, &one).is_err());
        let two = r#"{"id":"m2","question":"Which bases store supplies?",
            "document":"Alpha stores crates. Beta stores barrels. Gamma is empty.",
            "evidence_sentences":["Alpha stores crates.","Beta stores barrels."]}"#
            .replace('\n', " ");
        let case = convert_record(ConvertFormat::Mti, &two).unwrap();
        assert_eq!(case.gold[0].as_ref().unwrap().len(), 2);
    }
}
