//! Zero-indexing Internet search augmented generation.
//!
//! Everything is built around live web retrieval: a parser stage decides
//! whether a request needs Internet augmentation and emits keyword lists,
//! search adapters pull hits from engine APIs, pages are reduced to plain
//! text and split into numbered `<TAG-i>` segments, a mixed-granularity
//! reranker picks the top documents, and an extractor model returns the
//! tag ids of the relevant segments (or `None`), which are resolved back
//! to text and merged into the generation prompt.
//!
//! The crate also ships the surrounding apparatus: needle-based benchmark
//! generation, tag-set metrics, order-swapped pairwise judging with a
//! positional-bias bucket, the naive-concatenation and vector-store
//! baselines, and construction of SFT/DPO training files.

pub mod config;
pub mod eval;
pub mod extractor;
pub mod gateway;
pub mod parser;
pub mod pipeline;
pub mod reranker;
pub mod search;
pub mod segmenter;
pub mod tokenizer;
pub mod training;

pub use extractor::{EnrichedPrompt, ExtractionResult, MergedText};
pub use gateway::{ChatBackend, ChatCall, ChatReply, EmbedBackend, EmbeddingVector};
pub use parser::{InferenceRequest, KeywordList, KeywordRole, ParseOutcome, TimeAnnotation};
pub use pipeline::{Answer, PipelineConfig};
pub use reranker::{Granularity, RankCandidate, RankedSelection};
pub use search::{PlainDocument, SearchHit, SourceList};
pub use segmenter::{Segment, TaggedDocument};
pub use tokenizer::{ApproxTokenizer, Tokenizer};
