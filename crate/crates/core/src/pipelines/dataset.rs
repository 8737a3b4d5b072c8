use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lengthdecode::{BucketTable, BucketTag};

/// Which summarizer produced a dataset summary. Ordering is the tie-break
/// priority used when two candidates score equally.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelSource {
    #[serde(rename = "PEGASUS")]
    Pegasus,
    #[serde(rename = "BART")]
    Bart,
    #[serde(rename = "CTRLSum")]
    CtrlSum,
    #[serde(rename = "toy")]
    Toy,
}

impl ModelSource {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelSource::Pegasus => "PEGASUS",
            ModelSource::Bart => "BART",
            ModelSource::CtrlSum => "CTRLSum",
            ModelSource::Toy => "toy",
        }
    }
}

impl fmt::Display for ModelSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One dataset record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourTuple {
    pub question: String,
    pub article: String,
    pub summary: String,
    pub length_bucket: BucketTag,
    pub score: f64,
    pub model_source: ModelSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub article_id: Option<String>,
}

impl FourTuple {
    /// Checks the score range and that the summary length fits its bucket.
    pub fn validate(&self, table: &BucketTable) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::input(format!("score {} outside [0, 1]", self.score)));
        }
        let n = crate::corpus::tokenize(&self.summary).len();
        if !table.get(self.length_bucket).contains(n) {
            return Err(Error::input(format!(
                "summary of {n} tokens does not fit {}",
                self.length_bucket
            )));
        }
        if self.question.trim().is_empty() || self.article.trim().is_empty() {
            return Err(Error::input("question and article must be nonempty"));
        }
        Ok(())
    }
}

/// A generated question with its length-controlled answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QAPair {
    pub question: String,
    pub answer: String,
    pub bucket: BucketTag,
    pub article_id: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_tuple_json_keys() {
        let t = FourTuple {
            question: "Why is it?".into(),
            article: "Body.".into(),
            summary: "It is.".into(),
            length_bucket: BucketTag::Lb0,
            score: 0.9,
            model_source: ModelSource::CtrlSum,
            article_id: None,
        };
        let v: serde_json::Value = serde_json::to_value(&t).unwrap();
        assert_eq!(v["length_bucket"], "LB0");
        assert_eq!(v["model_source"], "CTRLSum");
        assert!(v.get("article_id").is_none());
        assert!(t.validate(&BucketTable::default()).is_ok());
        let bad = FourTuple {
            score: 1.5,
            ..t.clone()
        };
        assert!(bad.validate(&BucketTable::default()).is_err());
    }

    #[test]
    fn source_priority_order() {
        assert!(ModelSource::Pegasus < ModelSource::Bart);
        assert!(ModelSource::CtrlSum < ModelSource::Toy);
    }
}
