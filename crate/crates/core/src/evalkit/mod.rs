//! Automatic metrics and aggregation of human annotations.

mod human;
mod metrics;

use serde::{Deserialize, Serialize};

use crate::corpus::PairClassifier;
use crate::error::{Error, Result};
use crate::lengthdecode::BucketTag;
use crate::pipelines::QAPair;

pub use human::{
    aggregate_annotations, auc, binomial_ci, binomial_ci_with, classifier_metrics,
    joint_accuracy, majority_vote, preference_proportion, task_accuracy, task_successes,
    AnnotationRecord, AnnotationSummary, CiMethod, ClassifierMetrics, ModelAnnotations,
    Preference, Proportion, Task, VOTES_PER_ITEM,
};
pub use metrics::{bleu, lcs_len, metric_tokens, qacs, rouge_l};

/// Mean classifier scores of positive and negative human-judged pairs;
/// rough upper and lower reference lines for QACS.
pub const QACS_REFERENCE_UPPER: f64 = 0.359;
pub const QACS_REFERENCE_LOWER: f64 = 0.046;

/// Ground truth for one generated pair, matched on article id and (when
/// given) bucket.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub article_id: String,
    #[serde(default)]
    pub bucket: Option<BucketTag>,
    #[serde(default)]
    pub question: Option<String>,
    #[serde(default)]
    pub answer: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextScores {
    pub rouge_l: f64,
    pub bleu: f64,
    /// Pairs that had a reference.
    pub matched: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pairs: usize,
    pub qacs: f64,
    pub qacs_reference_upper: f64,
    pub qacs_reference_lower: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer: Option<TextScores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub question: Option<TextScores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub human: Option<AnnotationSummary>,
}

fn text_scores<'a>(items: impl Iterator<Item = (&'a str, &'a str)>) -> Result<Option<TextScores>> {
    let (mut r, mut b, mut n) = (0.0, 0.0, 0usize);
    for (hyp, reference) in items {
        r += rouge_l(hyp, reference)?;
        b += bleu(hyp, reference)?;
        n += 1;
    }
    Ok((n > 0).then(|| TextScores {
        rouge_l: r / n as f64,
        bleu: b / n as f64,
        matched: n,
    }))
}

/// Scores generated pairs. ROUGE-L and BLEU are averaged over pairs with a
/// matching reference; annotation aggregates are added when records are
/// given.
pub fn evaluate(
    pairs: &[QAPair],
    classifier: &dyn PairClassifier,
    references: Option<&[Reference]>,
    annotations: Option<(&[AnnotationRecord], CiMethod, f64)>,
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::input("no pairs to evaluate"));
    }
    let qa: Vec<(String, String)> = pairs
        .iter()
        .map(|p| (p.question.clone(), p.answer.clone()))
        .collect();
    let find = |p: &QAPair| {
        references.and_then(|refs| {
            refs.iter().find(|r| {
                r.article_id == p.article_id && r.bucket.map_or(true, |b| b == p.bucket)
            })
        })
    };
    let (answer, question) = match references {
        None => (None, None),
        Some(_) => (
            text_scores(pairs.iter().filter_map(|p| {
                find(p).and_then(|r| r.answer.as_deref().map(|a| (p.answer.as_str(), a)))
            }))?,
            text_scores(pairs.iter().filter_map(|p| {
                find(p).and_then(|r| r.question.as_deref().map(|q| (p.question.as_str(), q)))
            }))?,
        ),
    };
    let human = match annotations {
        Some((recs, method, level)) => Some(aggregate_annotations(recs, method, level)?),
        None => None,
    };
    Ok(MetricReport {
        pairs: pairs.len(),
        qacs: qacs(&qa, classifier)?,
        qacs_reference_upper: QACS_REFERENCE_UPPER,
        qacs_reference_lower: QACS_REFERENCE_LOWER,
        answer,
        question,
        human,
    })
}
