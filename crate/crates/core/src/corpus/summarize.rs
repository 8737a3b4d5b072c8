use crate::corpus::{detokenize, normalize_word, sentence_spans, tokenize};
use crate::error::Result;
use crate::lengthdecode::{
    constrained_generate, reassign_bucket, truncation_point, BucketTable, DecodeConstraint,
    DecodeMode, LengthBucket, NextTokenModel,
};
use crate::pipelines::ModelSource;
use crate::seqcore::{TokenId, Vocabulary};

/// A summarization model producing one summary under a length constraint.
pub trait Summarizer {
    fn source(&self) -> ModelSource;
    fn summarize(&self, body: &str, question: &str, constraint: &DecodeConstraint) -> Result<String>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSummary {
    pub text: String,
    /// Bucket of the truncated text; `None` means the candidate is unusable.
    pub bucket: Option<LengthBucket>,
    pub source: ModelSource,
    pub score: Option<f64>,
}

/// Next-token model that reproduces a fixed token stream and then ends;
/// every other token is impossible.
struct CopyModel<'a> {
    stream: &'a [TokenId],
    vocab: &'a Vocabulary,
}

impl NextTokenModel for CopyModel<'_> {
    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn eos_id(&self) -> TokenId {
        self.vocab.eos_id()
    }

    fn banned_ids(&self) -> Vec<TokenId> {
        self.vocab.non_content_ids()
    }

    fn next_logits(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut logits = vec![f64::NEG_INFINITY; self.vocab.len()];
        let next = self.stream.get(prefix.len()).copied().unwrap_or(self.vocab.eos_id());
        logits[next] = 0.0;
        Ok(logits)
    }
}

/// Runs the copy model over `text` under `constraint`.
fn copy_decode(text: &str, constraint: &DecodeConstraint) -> Result<String> {
    let words = tokenize(text);
    let vocab = Vocabulary::from_words(words.iter().copied().chain(["<copy>"]))?;
    let stream: Vec<TokenId> = words.iter().map(|w| vocab.id(w).expect("in vocab")).collect();
    let model = CopyModel {
        stream: &stream,
        vocab: &vocab,
    };
    let out = constrained_generate(&model, constraint, DecodeMode::Beam, 0)?;
    Ok(vocab.decode(&out))
}

/// Extractive lead summarizer: copies the article from the start, so after
/// truncation its output is the longest run of leading sentences that fits.
#[derive(Clone, Debug)]
pub struct LeadSummarizer {
    pub source: ModelSource,
}

impl Default for LeadSummarizer {
    fn default() -> Self {
        Self {
            source: ModelSource::Toy,
        }
    }
}

impl Summarizer for LeadSummarizer {
    fn source(&self) -> ModelSource {
        self.source
    }

    fn summarize(&self, body: &str, _question: &str, constraint: &DecodeConstraint) -> Result<String> {
        copy_decode(body, constraint)
    }
}

/// Question-prompted extractive summarizer: sentences are reordered by how
/// many question words they share (stable on ties), then copied.
#[derive(Clone, Debug)]
pub struct QuestionFocusedSummarizer {
    pub source: ModelSource,
}

impl Default for QuestionFocusedSummarizer {
    fn default() -> Self {
        Self {
            source: ModelSource::CtrlSum,
        }
    }
}

impl Summarizer for QuestionFocusedSummarizer {
    fn source(&self) -> ModelSource {
        self.source
    }

    fn summarize(&self, body: &str, question: &str, constraint: &DecodeConstraint) -> Result<String> {
        let qwords: Vec<String> = tokenize(question)
            .into_iter()
            .map(normalize_word)
            .filter(|w| !w.is_empty())
            .collect();
        let mut sentences: Vec<(usize, &str)> = sentence_spans(body)
            .into_iter()
            .map(|(s, e, _)| {
                let text = &body[s..e];
                let overlap = tokenize(text)
                    .into_iter()
                    .filter(|w| qwords.contains(&normalize_word(w)))
                    .count();
                (overlap, text)
            })
            .collect();
        sentences.sort_by(|a, b| b.0.cmp(&a.0));
        let reordered: Vec<&str> = sentences.into_iter().map(|(_, t)| t).collect();
        copy_decode(&reordered.join(" "), constraint)
    }
}

/// One candidate per summarizer for the requested bucket. Trailing
/// unfinished sentences are always removed and the bucket is reassigned from
/// the remaining length; candidates that fit no bucket are dropped, as are
/// summarizers that fail.
pub fn generate_candidates(
    body: &str,
    question: &str,
    bucket: LengthBucket,
    beam_width: usize,
    table: &BucketTable,
    summarizers: &[&dyn Summarizer],
) -> Result<Vec<CandidateSummary>> {
    let constraint = DecodeConstraint::new(bucket, beam_width)?;
    let mut out = Vec::new();
    for s in summarizers {
        let raw = match s.summarize(body, question, &constraint) {
            Ok(raw) => raw,
            Err(e) => {
                log::warn!("summarizer {} failed for bucket {}: {e}", s.source(), bucket.tag);
                continue;
            }
        };
        let tokens = tokenize(&raw);
        let keep = truncation_point(&tokens, 0);
        let text = detokenize(&tokens[..keep]);
        let Some(new_bucket) = reassign_bucket(table, keep, bucket) else {
            continue;
        };
        out.push(CandidateSummary {
            text,
            bucket: Some(new_bucket),
            source: s.source(),
            score: None,
        });
    }
    Ok(out)
}

/// Index of the highest-scoring candidate at or above `threshold`. Ties go
/// to the higher-priority source, then to the earlier candidate. Unscored
/// candidates are ignored.
pub fn select_best(candidates: &[CandidateSummary], threshold: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let Some(score) = c.score.filter(|s| *s >= threshold) else {
            continue;
        };
        let better = match best {
            None => true,
            Some((j, bs)) => score > bs || (score == bs && c.source < candidates[j].source),
        };
        if better {
            best = Some((i, score));
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lengthdecode::BucketTag;

    fn lb(tag: BucketTag) -> LengthBucket {
        BucketTable::default().get(tag)
    }

    struct Fixed(String);

    impl Summarizer for Fixed {
        fn source(&self) -> ModelSource {
            ModelSource::Bart
        }
        fn summarize(&self, _: &str, _: &str, _: &DecodeConstraint) -> Result<String> {
            Ok(self.0.clone())
        }
    }

    struct Failing;

    impl Summarizer for Failing {
        fn source(&self) -> ModelSource {
            ModelSource::Pegasus
        }
        fn summarize(&self, _: &str, _: &str, _: &DecodeConstraint) -> Result<String> {
            Err(crate::error::Error::input("boom"))
        }
    }

    fn words(n: usize, prefix: &str) -> String {
        let mut ws: Vec<String> = (0..n).map(|i| format!("{prefix}{i}")).collect();
        if let Some(last) = ws.last_mut() {
            last.push('.');
        }
        ws.join(" ")
    }

    #[test]
    fn lead_summarizer_takes_longest_fitting_sentence_prefix() {
        let body = format!("{} {} {}", words(12, "a"), words(10, "b"), words(15, "c"));
        let t = BucketTable::default();
        let lead = LeadSummarizer::default();
        let c = generate_candidates(&body, "q?", lb(BucketTag::Lb0), 4, &t, &[&lead]).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].text, format!("{} {}", words(12, "a"), words(10, "b")));
        assert_eq!(c[0].bucket.unwrap().tag, BucketTag::Lb0);
    }

    #[test]
    fn overlong_candidate_is_reassigned_and_failures_skipped() {
        let t = BucketTable::default();
        let fixed = Fixed(words(31, "w"));
        let c = generate_candidates("x", "q?", lb(BucketTag::Lb0), 4, &t, &[&Failing, &fixed])
            .unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].bucket.unwrap().tag, BucketTag::Lb1);
    }

    #[test]
    fn unfinished_only_candidate_is_dropped() {
        let t = BucketTable::default();
        let c = generate_candidates("x", "q?", lb(BucketTag::Lb0), 4, &t, &[&Fixed("no end here".into())])
            .unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn question_focused_summarizer_prefers_overlapping_sentences() {
        let body = "Cats sleep a lot. Dogs bark at night. Birds sing.";
        let s = QuestionFocusedSummarizer::default();
        let c = DecodeConstraint::new(lb(BucketTag::Lb0), 2).unwrap();
        let out = s.summarize(body, "Why do dogs bark?", &c).unwrap();
        assert!(out.starts_with("Dogs bark at night."));
    }

    fn cand(score: f64, source: ModelSource) -> CandidateSummary {
        CandidateSummary {
            text: "t.".into(),
            bucket: None,
            source,
            score: Some(score),
        }
    }

    #[test]
    fn selection_rules() {
        let cs = [
            cand(0.1, ModelSource::Toy),
            cand(0.5, ModelSource::Toy),
            cand(0.3, ModelSource::Toy),
        ];
        assert_eq!(select_best(&cs, 0.2), Some(1));
        assert_eq!(select_best(&cs, 0.6), None);
        let tie = [cand(0.5, ModelSource::CtrlSum), cand(0.5, ModelSource::Pegasus)];
        assert_eq!(select_best(&tie, 0.2), Some(1));
        let same = [cand(0.5, ModelSource::Bart), cand(0.5, ModelSource::Bart)];
        assert_eq!(select_best(&same, 0.2), Some(0));
    }
}
