use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_word, tokenize};
use crate::error::{Error, Result};

/// Scores how well an answer text answers a question, in `[0, 1]`.
pub trait PairClassifier {
    fn score(&self, question: &str, answer: &str) -> Result<f64>;
}

fn word_set(text: &str) -> BTreeSet<String> {
    tokenize(text)
        .into_iter()
        .map(normalize_word)
        .filter(|w| !w.is_empty())
        .collect()
}

/// `(recall, precision)` of question words found in the answer.
fn overlap_features(question: &str, answer: &str) -> (f64, f64) {
    let q = word_set(question);
    let a = word_set(answer);
    let shared = q.intersection(&a).count() as f64;
    let recall = if q.is_empty() { 0.0 } else { shared / q.len() as f64 };
    let precision = if a.is_empty() { 0.0 } else { shared / a.len() as f64 };
    (recall, precision)
}

/// Fraction of distinct question words that also occur in the answer.
#[derive(Clone, Copy, Debug, Default)]
pub struct OverlapClassifier;

impl PairClassifier for OverlapClassifier {
    fn score(&self, question: &str, answer: &str) -> Result<f64> {
        Ok(overlap_features(question, answer).0)
    }
}

/// Logistic regression over lexical-overlap features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticClassifier {
    /// Weights for (recall, precision) and a bias.
    pub weights: [f64; 3],
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl LogisticClassifier {
    /// Full-batch gradient descent on mean log-loss from zero weights.
    pub fn fit(examples: &[(String, String, bool)], epochs: usize, lr: f64) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Classifier("no training examples".into()));
        }
        let feats: Vec<([f64; 3], f64)> = examples
            .iter()
            .map(|(q, a, y)| {
                let (r, p) = overlap_features(q, a);
                ([r, p, 1.0], if *y { 1.0 } else { 0.0 })
            })
            .collect();
        let mut w = [0.0; 3];
        let n = feats.len() as f64;
        for _ in 0..epochs {
            let mut g = [0.0; 3];
            for (x, y) in &feats {
                let err = sigmoid(w[0] * x[0] + w[1] * x[1] + w[2] * x[2]) - y;
                for k in 0..3 {
                    g[k] += err * x[k] / n;
                }
            }
            for k in 0..3 {
                w[k] -= lr * g[k];
            }
        }
        Ok(Self { weights: w })
    }
}

impl PairClassifier for LogisticClassifier {
    fn score(&self, question: &str, answer: &str) -> Result<f64> {
        let (r, p) = overlap_features(question, answer);
        let w = &self.weights;
        let s = sigmoid(w[0] * r + w[1] * p + w[2]);
        if s.is_finite() {
            Ok(s)
        } else {
            Err(Error::Classifier(format!("non-finite score from weights {w:?}")))
        }
    }
}

/// Scores one pair, rejecting empty texts and out-of-range scores.
pub fn score_pair(question: &str, answer: &str, classifier: &dyn PairClassifier) -> Result<f64> {
    if question.trim().is_empty() || answer.trim().is_empty() {
        return Err(Error::input("question and answer must be nonempty"));
    }
    let s = classifier.score(question, answer)?;
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::Classifier(format!("score {s} outside [0, 1]")));
    }
    Ok(s)
}

/// Result of threshold calibration. Pairs are positive iff
/// `score >= threshold`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f64,
    /// Lowest dev score still classified positive.
    pub cut_score: f64,
    pub precision: f64,
    pub recall: f64,
    /// False when no threshold reaches the target; the threshold then
    /// maximizes precision instead.
    pub attained: bool,
}

/// Precision and recall when every score `>= cut` is predicted positive.
pub(crate) fn precision_recall_at(dev: &[(f64, bool)], cut: f64) -> (f64, f64) {
    let positives = dev.iter().filter(|(_, y)| *y).count() as f64;
    let (mut tp, mut fp) = (0.0, 0.0);
    for &(s, y) in dev {
        if s >= cut {
            if y {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
    }
    let precision = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
    (precision, tp / positives)
}

pub(crate) fn check_dev(dev: &[(f64, bool)]) -> Result<()> {
    if dev.is_empty() {
        return Err(Error::input("dev set is empty"));
    }
    if dev.iter().any(|(s, _)| !s.is_finite()) {
        return Err(Error::input("dev scores must be finite"));
    }
    if !dev.iter().any(|(_, y)| *y) || dev.iter().all(|(_, y)| *y) {
        return Err(Error::input("dev set needs both positive and negative labels"));
    }
    Ok(())
}

/// Lowest decision threshold whose dev precision reaches `target`.
///
/// Candidate cuts are the distinct dev scores; the lowest qualifying cut wins
/// (it has the highest recall). The reported threshold sits halfway between
/// that cut and the next lower dev score, or equals the cut when nothing
/// lies below it.
pub fn calibrate_threshold(dev: &[(f64, bool)], target: f64) -> Result<Calibration> {
    check_dev(dev)?;
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::input(format!("target precision {target} outside [0, 1]")));
    }
    let mut scores: Vec<f64> = dev.iter().map(|(s, _)| *s).collect();
    scores.sort_by(|a, b| b.total_cmp(a));
    scores.dedup();

    let mut qualifying: Option<usize> = None;
    let mut best: (usize, f64) = (0, f64::NEG_INFINITY);
    for (i, &cut) in scores.iter().enumerate() {
        let (p, _) = precision_recall_at(dev, cut);
        if p >= target {
            qualifying = Some(i);
        }
        if p >= best.1 {
            best = (i, p);
        }
    }
    let (idx, attained) = match qualifying {
        Some(i) => (i, true),
        None => (best.0, false),
    };
    let cut = scores[idx];
    let threshold = match scores.get(idx + 1) {
        Some(&below) => (cut + below) / 2.0,
        None => cut,
    };
    let (precision, recall) = precision_recall_at(dev, cut);
    Ok(Calibration {
        threshold,
        cut_score: cut,
        precision,
        recall,
        attained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlap_classifier_bounds() {
        let c = OverlapClassifier;
        assert_eq!(score_pair("why is the sky blue?", "why is the sky blue?", &c).unwrap(), 1.0);
        assert_eq!(score_pair("alpha beta?", "gamma delta.", &c).unwrap(), 0.0);
        assert!(score_pair("", "x", &c).is_err());
    }

    #[test]
    fn hand_enumerated_calibration() {
        let dev = [(0.9, true), (0.8, true), (0.7, false), (0.6, true)];
        let c = calibrate_threshold(&dev, 0.98).unwrap();
        assert_eq!(c.cut_score, 0.8);
        assert!((c.threshold - 0.75).abs() < 1e-12);
        assert_eq!(c.precision, 1.0);
        assert!((c.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!(c.attained);
    }

    #[test]
    fn separated_scores_give_midpoint() {
        let dev = [(0.9, true), (0.8, true), (0.3, false), (0.1, false)];
        let c = calibrate_threshold(&dev, 0.98).unwrap();
        assert!((c.threshold - 0.55).abs() < 1e-12);
        assert_eq!((c.precision, c.recall), (1.0, 1.0));
    }

    #[test]
    fn unattainable_target_is_flagged() {
        let dev = [(0.9, false), (0.8, true), (0.7, true)];
        let c = calibrate_threshold(&dev, 0.98).unwrap();
        assert!(!c.attained);
        assert_eq!(c.cut_score, 0.7);
        assert!((c.precision - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_dev_sets_are_errors() {
        assert!(calibrate_threshold(&[], 0.98).is_err());
        assert!(calibrate_threshold(&[(0.5, false), (0.2, false)], 0.98).is_err());
    }

    #[test]
    fn logistic_classifier_learns_overlap() {
        let ex: Vec<(String, String, bool)> = (0..20)
            .map(|i| {
                let q = format!("what about topic{i} today?");
                if i % 2 == 0 {
                    (q, format!("topic{i} today was calm."), true)
                } else {
                    (q, "unrelated words only.".to_string(), false)
                }
            })
            .collect();
        let c = LogisticClassifier::fit(&ex, 500, 1.0).unwrap();
        let pos = c.score(&ex[0].0, &ex[0].1).unwrap();
        let neg = c.score(&ex[1].0, &ex[1].1).unwrap();
        assert!(pos > 0.5 && neg < 0.5, "{pos} {neg}");
    }
}
