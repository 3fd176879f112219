//! Approximate token counting.
//!
//! The remote models' real tokenizers are not available here, so token
//! accounting runs through a pluggable port. The default counter splits on
//! whitespace and treats every punctuation character as its own token; the
//! counts are approximate but consistent, which is all the relative
//! comparisons need.

/// A pluggable token counter.
pub trait Tokenizer: Send + Sync {
    /// Token count of `text`.
    fn count(&self, text: &str) -> usize;

    /// The longest prefix of `text` containing at most `n` tokens.
    fn truncate<'a>(&self, text: &'a str, n: usize) -> &'a str;
}

/// Whitespace-and-punctuation splitter: alphanumeric runs are one token
/// each, every other non-whitespace character is its own token.
#[derive(Debug, Clone, Copy, Default)]
pub struct ApproxTokenizer;

impl ApproxTokenizer {
    /// Byte spans of each token, in order.
    fn spans(text: &str) -> Vec<(usize, usize)> {
        let mut spans = Vec::new();
        let mut run_start: Option<usize> = None;
        for (i, c) in text.char_indices() {
            if c.is_alphanumeric() {
                if run_start.is_none() {
                    run_start = Some(i);
                }
            } else {
                if let Some(s) = run_start.take() {
                    spans.push((s, i));
                }
                if !c.is_whitespace() {
                    spans.push((i, i + c.len_utf8()));
                }
            }
        }
        if let Some(s) = run_start {
            spans.push((s, text.len()));
        }
        spans
    }
}

impl Tokenizer for ApproxTokenizer {
    fn count(&self, text: &str) -> usize {
        Self::spans(text).len()
    }

    fn truncate<'a>(&self, text: &'a str, n: usize) -> &'a str {
        let spans = Self::spans(text);
        if spans.len() <= n {
            return text;
        }
        if n == 0 {
            return "";
        }
        &text[..spans[n - 1].1]
    }
}
