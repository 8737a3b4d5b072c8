use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lengthdecode::BucketTag;

pub type TokenId = usize;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<s>";
pub const SEP: &str = "</s>";
pub const UNK: &str = "<unk>";
const BUCKET_TOKENS: [&str; 3] = ["<LB0>", "<LB1>", "<LB2>"];
const SPECIALS: usize = 7;

/// Token inventory. The first seven ids are reserved, in order:
/// pad, `<s>`, `</s>` (end of sequence and text separator), unk and the
/// three length-bucket indicators.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

impl Vocabulary {
    /// Specials followed by the distinct `words` in first-seen order.
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = [PAD, BOS, SEP, UNK]
            .iter()
            .chain(BUCKET_TOKENS.iter())
            .map(|s| s.to_string())
            .collect();
        let mut index: HashMap<String, TokenId> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for w in words {
            let w = w.as_ref();
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::input(format!("invalid vocabulary word {w:?}")));
            }
            if !index.contains_key(w) {
                index.insert(w.to_string(), tokens.len());
                tokens.push(w.to_string());
            }
        }
        let vocab = Self { tokens, index };
        vocab.validate()?;
        Ok(vocab)
    }

    /// Builds a vocabulary from raw texts: words ordered by descending
    /// frequency, ties broken lexicographically. Words seen fewer than
    /// `min_count` times map to `<unk>`.
    pub fn build<'t>(texts: impl IntoIterator<Item = &'t str>, min_count: usize) -> Result<Self> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in texts {
            for w in crate::corpus::tokenize(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(&str, usize)> =
            counts.into_iter().filter(|(_, c)| *c >= min_count.max(1)).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_words(words.into_iter().map(|(w, _)| w))
    }

    fn validate(&self) -> Result<()> {
        if self.tokens.len() < 8 {
            return Err(Error::input(format!(
                "vocabulary needs at least 8 tokens, got {}",
                self.tokens.len()
            )));
        }
        if self.index.len() != self.tokens.len() {
            return Err(Error::input("vocabulary tokens are not distinct"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad_id(&self) -> TokenId {
        0
    }

    pub fn bos_id(&self) -> TokenId {
        1
    }

    /// `</s>` doubles as end-of-sequence and separator.
    pub fn eos_id(&self) -> TokenId {
        2
    }

    pub fn sep_id(&self) -> TokenId {
        2
    }

    pub fn unk_id(&self) -> TokenId {
        3
    }

    pub fn bucket_id(&self, tag: BucketTag) -> TokenId {
        4 + tag.index()
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id < SPECIALS
    }

    /// Ids that generation should never produce as content.
    pub fn non_content_ids(&self) -> Vec<TokenId> {
        vec![
            self.pad_id(),
            self.bos_id(),
            self.bucket_id(BucketTag::Lb0),
            self.bucket_id(BucketTag::Lb1),
            self.bucket_id(BucketTag::Lb2),
        ]
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        TokenSequence(
            crate::corpus::tokenize(text)
                .into_iter()
                .map(|w| self.id(w).unwrap_or(self.unk_id()))
                .collect(),
        )
    }

    /// Surface text: tokens joined by single spaces.
    pub fn decode(&self, seq: &[TokenId]) -> String {
        seq.iter()
            .map(|&id| self.token(id).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn check(&self, seq: &[TokenId]) -> Result<()> {
        match seq.iter().position(|&id| id >= self.len()) {
            Some(pos) => Err(Error::input(format!(
                "token id {} at position {pos} exceeds vocabulary size {}",
                seq[pos],
                self.len()
            ))),
            None => Ok(()),
        }
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        let expected: Vec<&str> = [PAD, BOS, SEP, UNK]
            .iter()
            .chain(BUCKET_TOKENS.iter())
            .copied()
            .collect();
        if tokens.len() < SPECIALS || tokens[..SPECIALS].iter().map(String::as_str).ne(expected) {
            return Err(Error::input("vocabulary does not start with the reserved tokens"));
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let vocab = Self { tokens, index };
        vocab.validate()?;
        Ok(vocab)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Ordered token ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(pub Vec<TokenId>);

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Self {
        Self(ids)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<TokenId>> for TokenSequence {
    fn from(v: Vec<TokenId>) -> Self {
        Self(v)
    }
}

impl std::ops::Deref for TokenSequence {
    type Target = [TokenId];
    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_distinct_and_stable() {
        let v = Vocabulary::from_words(["a"]).unwrap();
        let ids = [
            v.pad_id(),
            v.bos_id(),
            v.eos_id(),
            v.unk_id(),
            v.bucket_id(BucketTag::Lb0),
            v.bucket_id(BucketTag::Lb1),
            v.bucket_id(BucketTag::Lb2),
        ];
        let mut sorted = ids.to_vec();
        sorted.dedup();
        assert_eq!(sorted.len(), 7);
        assert_eq!(v.token(v.bucket_id(BucketTag::Lb1)), Some("<LB1>"));
        assert_eq!(v.len(), 8);
    }

    #[test]
    fn too_small_vocabulary_is_rejected() {
        assert!(Vocabulary::from_words(Vec::<&str>::new()).is_err());
    }

    #[test]
    fn build_orders_by_frequency_then_lexically() {
        let v = Vocabulary::build(["b a b", "c a b"], 1).unwrap();
        assert_eq!(&v.tokens()[7..], &["b", "a", "c"]);
        let v = Vocabulary::build(["b a b", "c a b"], 2).unwrap();
        assert_eq!(v.encode("c b").ids(), &[v.unk_id(), 7]);
    }

    #[test]
    fn serde_round_trip_validates() {
        let v = Vocabulary::from_words(["x", "y"]).unwrap();
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("y"), Some(8));
        assert!(serde_json::from_str::<Vocabulary>(r#"["a","b"]"#).is_err());
    }

    #[test]
    fn check_flags_out_of_range_ids() {
        let v = Vocabulary::from_words(["x"]).unwrap();
        assert!(v.check(&[0, 7]).is_ok());
        assert!(v.check(&[8]).is_err());
    }
}
