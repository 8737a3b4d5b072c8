use std::collections::HashMap;

use crate::corpus::{score_pair, tokenize, PairClassifier};
use crate::error::{Error, Result};

/// Lowercased whitespace tokens; the tokenization every text metric uses.
pub fn metric_tokens(text: &str) -> Vec<String> {
    tokenize(text).into_iter().map(str::to_lowercase).collect()
}

fn nonempty(text: &str, what: &str) -> Result<Vec<String>> {
    let t = metric_tokens(text);
    if t.is_empty() {
        return Err(Error::input(format!("{what} is empty")));
    }
    Ok(t)
}

/// Longest common subsequence length, `O(|a|·|b|)` time and `O(|b|)` space.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure on a 0–100 scale.
pub fn rouge_l(hypothesis: &str, reference: &str) -> Result<f64> {
    let h = nonempty(hypothesis, "hypothesis")?;
    let r = nonempty(reference, "reference")?;
    let lcs = lcs_len(&h, &r) as f64;
    let p = lcs / h.len() as f64;
    let rec = lcs / r.len() as f64;
    if p + rec == 0.0 {
        return Ok(0.0);
    }
    Ok(100.0 * 2.0 * p * rec / (p + rec))
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Clipped n-gram matches and the hypothesis n-gram total.
pub(crate) fn modified_precision(h: &[String], r: &[String], n: usize) -> (usize, usize) {
    let hc = ngram_counts(h, n);
    let rc = ngram_counts(r, n);
    let matched = hc
        .iter()
        .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, h.len().saturating_sub(n - 1))
}

/// Sentence BLEU-4 on a 0–100 scale: geometric mean of modified n-gram
/// precisions with a brevity penalty. Precisions for n ≥ 2 are add-one
/// smoothed; without a unigram match the score is 0.
pub fn bleu(hypothesis: &str, reference: &str) -> Result<f64> {
    let h = nonempty(hypothesis, "hypothesis")?;
    let r = nonempty(reference, "reference")?;
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (m, total) = modified_precision(&h, &r, n);
        let p = if n == 1 {
            m as f64 / total as f64
        } else {
            (m + 1) as f64 / (total + 1) as f64
        };
        if p == 0.0 {
            return Ok(0.0);
        }
        log_sum += p.ln() / 4.0;
    }
    let (c, rl) = (h.len() as f64, r.len() as f64);
    let bp = if c > rl { 1.0 } else { (1.0 - rl / c).exp() };
    Ok((100.0 * bp * log_sum.exp()).min(100.0))
}

/// Mean classifier score over generated `(question, answer)` pairs.
pub fn qacs(pairs: &[(String, String)], classifier: &dyn PairClassifier) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::input("no pairs to score"));
    }
    let mut sum = 0.0;
    for (q, a) in pairs {
        sum += score_pair(q, a, classifier)?;
    }
    Ok(sum / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l("a b c", "a b c").unwrap(), 100.0);
        assert!((rouge_l("a c", "a b c").unwrap() - 80.0).abs() < 1e-12);
        assert_eq!(rouge_l("x y", "a b").unwrap(), 0.0);
        assert_eq!(rouge_l("A B", "a b").unwrap(), 100.0);
        assert!(rouge_l("", "a").is_err());
    }

    #[test]
    fn bleu_examples() {
        assert!((bleu("the cat sat", "the cat sat").unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(bleu("x y z", "a b c").unwrap(), 0.0);
        assert!(bleu("a", "").is_err());
    }

    #[test]
    fn lcs_small() {
        assert_eq!(lcs_len(&[1, 2, 3, 4], &[2, 4, 3]), 2);
        assert_eq!(lcs_len::<u8>(&[], &[1]), 0);
    }
}
