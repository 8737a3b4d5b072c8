//! Length buckets and length-controlled decoding.

use std::fmt;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqcore::{argmax, sample_categorical, TokenId, TokenSequence, Vocabulary};
use crate::tensor::{log_softmax, softmax};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BucketTag {
    #[serde(rename = "LB0")]
    Lb0,
    #[serde(rename = "LB1")]
    Lb1,
    #[serde(rename = "LB2")]
    Lb2,
}

impl BucketTag {
    pub const ALL: [BucketTag; 3] = [BucketTag::Lb0, BucketTag::Lb1, BucketTag::Lb2];

    pub fn index(self) -> usize {
        match self {
            BucketTag::Lb0 => 0,
            BucketTag::Lb1 => 1,
            BucketTag::Lb2 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BucketTag::Lb0 => "LB0",
            BucketTag::Lb1 => "LB1",
            BucketTag::Lb2 => "LB2",
        }
    }
}

impl fmt::Display for BucketTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for BucketTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "LB0" => Ok(BucketTag::Lb0),
            "LB1" => Ok(BucketTag::Lb1),
            "LB2" => Ok(BucketTag::Lb2),
            _ => Err(Error::input(format!("unknown length bucket {s:?}"))),
        }
    }
}

/// A token-count range. `min_tokens` and `max_tokens` are both inclusive,
/// so LB1 = (30, 50] has `min_tokens = 31`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthBucket {
    pub tag: BucketTag,
    pub min_tokens: usize,
    pub max_tokens: usize,
}

impl LengthBucket {
    pub fn new(tag: BucketTag, min_tokens: usize, max_tokens: usize) -> Result<Self> {
        if min_tokens == 0 || min_tokens > max_tokens {
            return Err(Error::Config(format!(
                "bucket {tag} needs 0 < min_tokens <= max_tokens, got {min_tokens}..={max_tokens}"
            )));
        }
        Ok(Self {
            tag,
            min_tokens,
            max_tokens,
        })
    }

    pub fn contains(&self, len: usize) -> bool {
        self.min_tokens <= len && len <= self.max_tokens
    }
}

/// The bucket table. Defaults to (0, 30], (30, 50], (50, 72].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<LengthBucket>", into = "Vec<LengthBucket>")]
pub struct BucketTable {
    buckets: Vec<LengthBucket>,
}

impl Default for BucketTable {
    fn default() -> Self {
        Self::from_upper_bounds([30, 50, 72]).expect("default buckets are valid")
    }
}

impl BucketTable {
    /// Contiguous buckets from inclusive upper bounds, first lower bound 0.
    pub fn from_upper_bounds(uppers: [usize; 3]) -> Result<Self> {
        let mut lower = 0;
        let mut buckets = Vec::new();
        for (tag, upper) in BucketTag::ALL.into_iter().zip(uppers) {
            buckets.push(LengthBucket::new(tag, lower + 1, upper)?);
            lower = upper;
        }
        Self::try_from(buckets)
    }

    pub fn get(&self, tag: BucketTag) -> LengthBucket {
        self.buckets[tag.index()]
    }

    pub fn buckets(&self) -> &[LengthBucket] {
        &self.buckets
    }

    /// The bucket containing `token_count`, if any.
    pub fn assign(&self, token_count: usize) -> Option<LengthBucket> {
        self.buckets.iter().copied().find(|b| b.contains(token_count))
    }

    pub fn max_tokens(&self) -> usize {
        self.buckets.iter().map(|b| b.max_tokens).max().unwrap_or(0)
    }
}

impl TryFrom<Vec<LengthBucket>> for BucketTable {
    type Error = Error;

    fn try_from(buckets: Vec<LengthBucket>) -> Result<Self> {
        if buckets.len() != 3 {
            return Err(Error::Config("bucket table needs exactly three buckets".into()));
        }
        for (i, b) in buckets.iter().enumerate() {
            if b.tag.index() != i {
                return Err(Error::Config("buckets must be listed as LB0, LB1, LB2".into()));
            }
            LengthBucket::new(b.tag, b.min_tokens, b.max_tokens)?;
            if i > 0 && b.min_tokens <= buckets[i - 1].max_tokens {
                return Err(Error::Config(format!("bucket {} overlaps its predecessor", b.tag)));
            }
        }
        Ok(Self { buckets })
    }
}

impl From<BucketTable> for Vec<LengthBucket> {
    fn from(t: BucketTable) -> Self {
        t.buckets
    }
}

/// Bucket for `token_count` under the default table.
pub fn assign_bucket(token_count: usize) -> Option<LengthBucket> {
    BucketTable::default().assign(token_count)
}

/// Bucket for a (truncated) summary length; may differ from `original`.
pub fn reassign_bucket(
    table: &BucketTable,
    summary_len: usize,
    original: LengthBucket,
) -> Option<LengthBucket> {
    let b = table.assign(summary_len);
    if let Some(b) = b {
        if b.tag != original.tag {
            log::debug!("bucket reassigned {} -> {} (length {summary_len})", original.tag, b.tag);
        }
    }
    b
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConstraint {
    pub bucket: LengthBucket,
    pub beam_width: usize,
}

impl DecodeConstraint {
    pub fn new(bucket: LengthBucket, beam_width: usize) -> Result<Self> {
        if beam_width == 0 {
            return Err(Error::Config("beam_width must be at least 1".into()));
        }
        LengthBucket::new(bucket.tag, bucket.min_tokens, bucket.max_tokens)?;
        Ok(Self { bucket, beam_width })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Beam,
    Greedy,
    Sample,
}

/// Autoregressive next-token scorer with a fixed conditioning context.
pub trait NextTokenModel {
    fn vocab_size(&self) -> usize;
    fn eos_id(&self) -> TokenId;
    /// Ids never produced as content (padding, start, bucket markers).
    fn banned_ids(&self) -> Vec<TokenId> {
        Vec::new()
    }
    /// Logits for the token following `prefix` (content tokens only).
    fn next_logits(&self, prefix: &[TokenId]) -> Result<Vec<f64>>;
}

/// Log-probabilities after the length constraint is applied: EOS is
/// impossible before `min_tokens`, and the only option at `max_tokens`.
fn constrained_log_probs<M: NextTokenModel + ?Sized>(
    model: &M,
    banned: &[TokenId],
    bucket: &LengthBucket,
    prefix: &[TokenId],
) -> Result<Vec<f64>> {
    let eos = model.eos_id();
    let mut logits = model.next_logits(prefix)?;
    if logits.len() != model.vocab_size() {
        return Err(Error::input(format!(
            "model returned {} logits for vocabulary of {}",
            logits.len(),
            model.vocab_size()
        )));
    }
    for &b in banned {
        if b != eos && b < logits.len() {
            logits[b] = f64::NEG_INFINITY;
        }
    }
    if prefix.len() >= bucket.max_tokens {
        for (i, l) in logits.iter_mut().enumerate() {
            *l = if i == eos { 0.0 } else { f64::NEG_INFINITY };
        }
    } else if prefix.len() < bucket.min_tokens {
        logits[eos] = f64::NEG_INFINITY;
    }
    if logits.iter().all(|l| *l == f64::NEG_INFINITY) {
        return Err(Error::input("every token is masked"));
    }
    Ok(log_softmax(&logits))
}

/// A finished beam hypothesis.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Content tokens, without the final EOS.
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    /// `log_prob` divided by the emitted length including EOS.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamResult {
    pub best: Hypothesis,
    /// Every completed hypothesis in the final beam, in completion order.
    pub finished: Vec<Hypothesis>,
}

/// Length-normalized beam search. Candidates are ranked by cumulative
/// log-probability with ties going to the lower (beam, token) index; search
/// stops once `beam_width` hypotheses have finished.
pub fn beam_search<M: NextTokenModel + ?Sized>(
    model: &M,
    constraint: &DecodeConstraint,
) -> Result<BeamResult> {
    let eos = model.eos_id();
    let banned = model.banned_ids();
    let width = constraint.beam_width;
    let mut live: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();

    while !live.is_empty() && finished.len() < width {
        let mut cands: Vec<(f64, usize, TokenId)> = Vec::new();
        for (bi, (prefix, lp)) in live.iter().enumerate() {
            let step = constrained_log_probs(model, &banned, &constraint.bucket, prefix)?;
            for (tok, &s) in step.iter().enumerate() {
                if s > f64::NEG_INFINITY {
                    cands.push((lp + s, bi, tok));
                }
            }
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(width);
        for (lp, bi, tok) in cands {
            if next.len() == width || finished.len() == width {
                break;
            }
            let prefix = &live[bi].0;
            if tok == eos {
                finished.push(Hypothesis {
                    tokens: prefix.clone(),
                    log_prob: lp,
                    score: lp / (prefix.len() + 1) as f64,
                });
            } else {
                let mut p = prefix.clone();
                p.push(tok);
                next.push((p, lp));
            }
        }
        live = next;
    }

    let best = finished
        .iter()
        .enumerate()
        .fold(None::<(usize, f64)>, |acc, (i, h)| match acc {
            Some((_, s)) if s >= h.score => acc,
            _ => Some((i, h.score)),
        })
        .map(|(i, _)| finished[i].clone())
        .ok_or_else(|| Error::input("beam search finished no hypotheses"))?;
    Ok(BeamResult { best, finished })
}

/// Generates content tokens whose length lies in `constraint.bucket`.
pub fn constrained_generate<M: NextTokenModel + ?Sized>(
    model: &M,
    constraint: &DecodeConstraint,
    mode: DecodeMode,
    seed: u64,
) -> Result<TokenSequence> {
    match mode {
        DecodeMode::Beam => Ok(TokenSequence(beam_search(model, constraint)?.best.tokens)),
        DecodeMode::Greedy | DecodeMode::Sample => {
            let eos = model.eos_id();
            let banned = model.banned_ids();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = Vec::new();
            loop {
                let lp = constrained_log_probs(model, &banned, &constraint.bucket, &out)?;
                let tok = match mode {
                    DecodeMode::Greedy => argmax(&lp),
                    _ => sample_categorical(&softmax(&lp), &mut rng),
                };
                if tok == eos {
                    return Ok(TokenSequence(out));
                }
                out.push(tok);
            }
        }
    }
}

fn ends_sentence(token: &str) -> bool {
    token.ends_with(['.', '!', '?'])
}

/// Number of leading tokens to keep after dropping a trailing unfinished
/// sentence. Returns `tokens.len()` when the text already ends a sentence or
/// when dropping would leave fewer than `min_tokens`.
pub fn truncation_point<S: AsRef<str>>(tokens: &[S], min_tokens: usize) -> usize {
    match tokens.iter().rposition(|t| ends_sentence(t.as_ref())) {
        Some(i) if i + 1 == tokens.len() => tokens.len(),
        Some(i) if i + 1 >= min_tokens => i + 1,
        None if min_tokens == 0 => 0,
        _ => tokens.len(),
    }
}

/// Drops a trailing unfinished sentence unless that would take the text
/// below the bucket minimum.
pub fn truncate_unfinished(
    tokens: &TokenSequence,
    bucket: &LengthBucket,
    vocab: &Vocabulary,
) -> TokenSequence {
    let words: Vec<&str> = tokens.iter().map(|&id| vocab.token(id).unwrap_or("")).collect();
    let keep = truncation_point(&words, bucket.min_tokens);
    TokenSequence(tokens[..keep].to_vec())
}
