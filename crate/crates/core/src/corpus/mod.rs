//! Dataset construction: title filtering, question stripping, candidate
//! summaries, pair scoring and per-bucket selection.

mod build;
mod classify;
mod filter;
mod summarize;

use serde::{Deserialize, Serialize};

pub use build::{build_dataset, BucketSourceStats, DatasetConfig, DatasetReport};
pub use classify::{
    calibrate_threshold, score_pair, Calibration, LogisticClassifier, OverlapClassifier,
    PairClassifier,
};
pub(crate) use classify::{check_dev, precision_recall_at};
pub use filter::{filter_title, FilterConfig, TitleRule, TitleVerdict};
pub use summarize::{
    generate_candidates, select_best, CandidateSummary, LeadSummarizer,
    QuestionFocusedSummarizer, Summarizer,
};

/// A news article as read from the input JSON Lines file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Article {
    pub id: String,
    pub title: String,
    pub body: String,
    #[serde(default)]
    pub source_domain: String,
    #[serde(default)]
    pub date: String,
}

/// Whitespace tokenizer used for every token count.
pub fn tokenize(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Lowercased word with surrounding punctuation and a possessive `'s`
/// removed; used for word-level matching.
pub(crate) fn normalize_word(token: &str) -> String {
    let w = token
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase();
    for suffix in ["'s", "\u{2019}s"] {
        if let Some(stem) = w.strip_suffix(suffix) {
            return stem.to_string();
        }
    }
    w
}

const CLOSERS: &[char] = &['"', '\'', ')', ']', '\u{201d}', '\u{2019}'];

fn sentence_end(token: &str) -> Option<char> {
    token
        .trim_end_matches(CLOSERS)
        .chars()
        .last()
        .filter(|c| matches!(c, '.' | '!' | '?'))
}

/// Byte ranges of sentences in `text`. A sentence ends at a token whose last
/// character (ignoring closing quotes and brackets) is `.`, `!` or `?`; a
/// trailing fragment counts as a sentence.
pub(crate) fn sentence_spans(text: &str) -> Vec<(usize, usize, Option<char>)> {
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    let mut pos = 0;
    for token in text.split_whitespace() {
        let offset = pos + text[pos..].find(token).expect("token comes from text");
        let end = offset + token.len();
        pos = end;
        let s = *start.get_or_insert(offset);
        if let Some(c) = sentence_end(token) {
            spans.push((s, end, Some(c)));
            start = None;
        }
    }
    if let Some(s) = start {
        spans.push((s, pos, None));
    }
    spans
}

/// Removes every sentence that ends with `?`. Returns `body` untouched when
/// it contains no question.
pub fn strip_questions(body: &str) -> String {
    let spans = sentence_spans(body);
    if spans.iter().all(|(_, _, end)| *end != Some('?')) {
        return body.to_string();
    }
    spans
        .iter()
        .filter(|(_, _, end)| *end != Some('?'))
        .map(|&(s, e, _)| &body[s..e])
        .collect::<Vec<_>>()
        .join(" ")
}
