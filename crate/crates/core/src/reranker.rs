//! Mixed ranking: every pooled document is scored twice — once by its
//! search-engine snippet and once by its full content — and documents are
//! ranked by the better of the two scores, which erases engine-side
//! ordering bias.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{embed, EmbedBackend, GatewayError};
use crate::parser::{KeywordList, ParseOutcome};
use crate::search::SourceList;
use crate::segmenter::TaggedDocument;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Granularity {
    Snippet,
    Full,
}

/// One of the 2n scoring items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankCandidate {
    pub doc_index: usize,
    pub granularity: Granularity,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub doc_index: usize,
    pub best_score: f64,
    pub winning_granularity: Granularity,
}

/// Top-K distinct documents, best score first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedSelection {
    pub entries: Vec<RankedEntry>,
}

/// A pooled document plus the hit context used for tie-breaking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub doc: TaggedDocument,
    pub source_list: SourceList,
    pub engine_rank: u32,
}

#[derive(Debug, Error)]
pub enum RerankError {
    #[error("empty document pool")]
    EmptyPool,
    #[error("empty keyword list")]
    EmptyKeywords,
    #[error("no main keyword list in parse outcome")]
    NoMainList,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Score sentinel for candidates that can never win (empty snippet,
/// failed embedding).
pub const LOSING_SCORE: f64 = -1.0;

/// Score all 2n candidates: cosine between the main-keyword query
/// embedding and each candidate text embedding. Per-candidate failures
/// score −1 with a trace note instead of aborting.
pub fn score_candidates(
    embedder: &dyn EmbedBackend,
    keywords: &KeywordList,
    docs: &[PoolEntry],
) -> Result<(Vec<RankCandidate>, Vec<String>), RerankError> {
    if docs.is_empty() {
        return Err(RerankError::EmptyPool);
    }
    if keywords.keywords.is_empty() {
        return Err(RerankError::EmptyKeywords);
    }
    let query = embed(embedder, &keywords.query_text())?;
    let cap = embedder.input_cap_chars();

    use rayon::prelude::*;
    let scored: Vec<(RankCandidate, Option<String>)> = docs
        .par_iter()
        .enumerate()
        .flat_map(|(doc_index, entry)| {
            let snippet_text = entry.doc.snippet.clone();
            let full_text: String = entry.doc.full_text().chars().take(cap).collect();
            vec![
                (doc_index, Granularity::Snippet, snippet_text),
                (doc_index, Granularity::Full, full_text),
            ]
        })
        .map(|(doc_index, granularity, text)| {
            if text.trim().is_empty() {
                let note = format!("doc {doc_index} {granularity:?}: empty text, scored -1");
                return (
                    RankCandidate {
                        doc_index,
                        granularity,
                        score: LOSING_SCORE,
                    },
                    Some(note),
                );
            }
            match embed(embedder, &text) {
                Ok(v) => (
                    RankCandidate {
                        doc_index,
                        granularity,
                        score: query.cosine(&v),
                    },
                    None,
                ),
                Err(e) => (
                    RankCandidate {
                        doc_index,
                        granularity,
                        score: LOSING_SCORE,
                    },
                    Some(format!("doc {doc_index} {granularity:?}: embed failed: {e}")),
                ),
            }
        })
        .collect();

    let mut candidates = Vec::with_capacity(scored.len());
    let mut notes = Vec::new();
    for (c, note) in scored {
        candidates.push(c);
        if let Some(n) = note {
            notes.push(n);
        }
    }
    debug_assert_eq!(candidates.len(), 2 * docs.len());
    Ok((candidates, notes))
}

/// Aggregate candidates per document by best-of-either score, sort
/// descending, break ties by (main list before auxiliary, lower engine
/// rank, lower doc index), take the top `k`.
pub fn select_top_k(candidates: &[RankCandidate], docs: &[PoolEntry], k: usize) -> RankedSelection {
    assert!(k >= 1, "K must be >= 1");
    let n = docs.len();
    let mut best: Vec<Option<(f64, Granularity)>> = vec![None; n];
    for c in candidates {
        let slot = &mut best[c.doc_index];
        // Snippet candidates come first; Full replaces only on a strictly
        // better score, so equal scores keep the Snippet granularity.
        match slot {
            Some((s, _)) if *s >= c.score => {}
            _ => *slot = Some((c.score, c.granularity)),
        }
    }
    let mut entries: Vec<RankedEntry> = best
        .into_iter()
        .enumerate()
        .filter_map(|(doc_index, b)| {
            b.map(|(best_score, winning_granularity)| RankedEntry {
                doc_index,
                best_score,
                winning_granularity,
            })
        })
        .collect();
    entries.sort_by(|a, b| {
        b.best_score
            .partial_cmp(&a.best_score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| {
                let rank = |e: &RankedEntry| {
                    let d = &docs[e.doc_index];
                    (
                        if d.source_list.is_main() { 0u8 } else { 1u8 },
                        d.engine_rank,
                        e.doc_index,
                    )
                };
                rank(a).cmp(&rank(b))
            })
    });
    entries.truncate(k.min(n));
    RankedSelection { entries }
}

/// Step 3: score then select; returns the selection plus every candidate
/// score for the trace.
pub fn rerank(
    embedder: &dyn EmbedBackend,
    outcome: &ParseOutcome,
    docs: &[PoolEntry],
    k: usize,
) -> Result<(RankedSelection, Vec<RankCandidate>, Vec<String>), RerankError> {
    let main = outcome.main_list().ok_or(RerankError::NoMainList)?;
    let (candidates, notes) = score_candidates(embedder, main, docs)?;
    let selection = select_top_k(&candidates, docs, k);
    Ok((selection, candidates, notes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::HashEmbedder;
    use crate::parser::KeywordRole;

    fn entry(snippet: &str, body: &str, source: SourceList, rank: u32) -> PoolEntry {
        PoolEntry {
            doc: TaggedDocument::from_body(format!("https://{rank}.example/"), snippet, body),
            source_list: source,
            engine_rank: rank,
        }
    }

    fn keywords(kws: &[&str]) -> KeywordList {
        KeywordList {
            language: "en".into(),
            keywords: kws.iter().map(|s| s.to_string()).collect(),
            role: KeywordRole::Main,
        }
    }

    fn cand(doc_index: usize, granularity: Granularity, score: f64) -> RankCandidate {
        RankCandidate {
            doc_index,
            granularity,
            score,
        }
    }

    #[test]
    fn doubles_candidates() {
        let embedder = HashEmbedder::new(64);
        let docs = vec![
            entry("apple pie", "apples are fruit.", SourceList::Main, 1),
            entry("car repair", "fixing cars.", SourceList::Main, 2),
            entry("rust lang", "rust is a language.", SourceList::Main, 3),
        ];
        let (cands, _) = score_candidates(&embedder, &keywords(&["apple"]), &docs).unwrap();
        assert_eq!(cands.len(), 6);
    }

    #[test]
    fn empty_snippet_scores_losing() {
        let embedder = HashEmbedder::new(64);
        let docs = vec![entry("", "some body text.", SourceList::Main, 1)];
        let (cands, notes) = score_candidates(&embedder, &keywords(&["body"]), &docs).unwrap();
        let snippet = cands
            .iter()
            .find(|c| c.granularity == Granularity::Snippet)
            .unwrap();
        assert_eq!(snippet.score, LOSING_SCORE);
        assert_eq!(notes.len(), 1);
    }

    #[test]
    fn scores_match_direct_recomputation() {
        let embedder = HashEmbedder::new(64);
        let docs = vec![entry("apple pie recipe", "how to bake apple pie.", SourceList::Main, 1)];
        let kw = keywords(&["apple", "pie"]);
        let (cands, _) = score_candidates(&embedder, &kw, &docs).unwrap();
        let q = embed(&embedder, "apple pie").unwrap();
        let s = embed(&embedder, "apple pie recipe").unwrap();
        let f = embed(&embedder, &docs[0].doc.full_text()).unwrap();
        for c in cands {
            let expected = match c.granularity {
                Granularity::Snippet => q.cosine(&s),
                Granularity::Full => q.cosine(&f),
            };
            assert!((c.score - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn best_of_either_example() {
        let docs = vec![
            entry("a", "a.", SourceList::Main, 1),
            entry("b", "b.", SourceList::Main, 2),
        ];
        let candidates = vec![
            cand(0, Granularity::Snippet, 0.5),
            cand(0, Granularity::Full, 0.8),
            cand(1, Granularity::Snippet, 0.9),
            cand(1, Granularity::Full, 0.2),
        ];
        let sel = select_top_k(&candidates, &docs, 2);
        assert_eq!(sel.entries.len(), 2);
        assert_eq!(sel.entries[0].doc_index, 1);
        assert_eq!(sel.entries[0].best_score, 0.9);
        assert_eq!(sel.entries[0].winning_granularity, Granularity::Snippet);
        assert_eq!(sel.entries[1].doc_index, 0);
        assert_eq!(sel.entries[1].best_score, 0.8);
        assert_eq!(sel.entries[1].winning_granularity, Granularity::Full);
    }

    #[test]
    fn singleton_pool_always_selected() {
        let docs = vec![entry("only", "only.", SourceList::Main, 1)];
        let candidates = vec![
            cand(0, Granularity::Snippet, -0.3),
            cand(0, Granularity::Full, -0.9),
        ];
        let sel = select_top_k(&candidates, &docs, 3);
        assert_eq!(sel.entries.len(), 1);
        assert_eq!(sel.entries[0].doc_index, 0);
    }

    #[test]
    fn tie_break_main_before_auxiliary() {
        let docs = vec![
            entry("aux", "aux.", SourceList::Auxiliary("zh".into()), 1),
            entry("main", "main.", SourceList::Main, 1),
        ];
        let candidates = vec![
            cand(0, Granularity::Snippet, 0.7),
            cand(0, Granularity::Full, 0.1),
            cand(1, Granularity::Snippet, 0.7),
            cand(1, Granularity::Full, 0.1),
        ];
        let sel = select_top_k(&candidates, &docs, 2);
        assert_eq!(sel.entries[0].doc_index, 1);
        assert_eq!(sel.entries[1].doc_index, 0);
    }

    #[test]
    fn k_larger_than_pool_returns_all() {
        let docs = vec![
            entry("a", "a.", SourceList::Main, 1),
            entry("b", "b.", SourceList::Main, 2),
        ];
        let candidates = vec![
            cand(0, Granularity::Snippet, 0.1),
            cand(0, Granularity::Full, 0.2),
            cand(1, Granularity::Snippet, 0.3),
            cand(1, Granularity::Full, 0.4),
        ];
        let sel = select_top_k(&candidates, &docs, 10);
        assert_eq!(sel.entries.len(), 2);
    }

    #[test]
    fn selection_scores_non_increasing_and_distinct() {
        let embedder = HashEmbedder::new(64);
        let docs: Vec<PoolEntry> = (0..8)
            .map(|i| {
                entry(
                    &format!("snippet number {i}"),
                    &format!("body text about topic {i}."),
                    SourceList::Main,
                    i as u32 + 1,
                )
            })
            .collect();
        let kw = keywords(&["topic", "3"]);
        let (cands, _) = score_candidates(&embedder, &kw, &docs).unwrap();
        let sel = select_top_k(&cands, &docs, 5);
        let mut seen = std::collections::HashSet::new();
        for w in sel.entries.windows(2) {
            assert!(w[0].best_score >= w[1].best_score);
        }
        for e in &sel.entries {
            assert!(seen.insert(e.doc_index));
        }
    }
}
