use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_word, tokenize};
use crate::error::{Error, Result};

/// Title and article rules, in the order they are checked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TitleRule {
    QuestionPrefix,
    QuestionMark,
    Blocklist,
    BareThis,
    StockSymbol,
    Punctuation,
    TitleLength,
    ArticleLength,
    QuestionInBody,
}

impl TitleRule {
    pub fn as_str(self) -> &'static str {
        match self {
            TitleRule::QuestionPrefix => "question_prefix",
            TitleRule::QuestionMark => "question_mark",
            TitleRule::Blocklist => "blocklist",
            TitleRule::BareThis => "bare_this",
            TitleRule::StockSymbol => "stock_symbol",
            TitleRule::Punctuation => "punctuation",
            TitleRule::TitleLength => "title_length",
            TitleRule::ArticleLength => "article_length",
            TitleRule::QuestionInBody => "question_in_body",
        }
    }
}

impl fmt::Display for TitleRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TitleVerdict {
    pub accepted: bool,
    pub rejected_by: Option<TitleRule>,
}

impl TitleVerdict {
    fn accept() -> Self {
        Self {
            accepted: true,
            rejected_by: None,
        }
    }

    fn reject(rule: TitleRule) -> Self {
        Self {
            accepted: false,
            rejected_by: Some(rule),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub question_prefixes: Vec<String>,
    pub blocklist: Vec<String>,
    pub this_allowlist: Vec<String>,
    /// Characters rejected anywhere in a title. `?` is always rejected
    /// except as the final character.
    pub forbidden_punctuation: String,
    pub min_article_tokens: usize,
    pub min_title_tokens: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        let words = |ws: &[&str]| ws.iter().map(|w| w.to_string()).collect();
        Self {
            question_prefixes: words(&[
                "Where", "What", "Did", "Which", "When", "How", "Are", "Is", "Can", "Should",
                "Who", "Will", "Why", "Whose", "Does", "Do", "Would", "Could", "Shall", "Was",
                "Were", "Has", "Have", "Had",
            ]),
            blocklist: words(&["you", "Stock"]),
            this_allowlist: words(&[
                "year", "week", "month", "season", "summer", "winter", "spring", "fall",
                "weekend", "time",
            ]),
            forbidden_punctuation: ",;:.!\"\u{201c}\u{201d}".to_string(),
            min_article_tokens: 100,
            min_title_tokens: 3,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.question_prefixes.is_empty() {
            return Err(Error::Config("question_prefixes must be nonempty".into()));
        }
        if self.min_article_tokens == 0 || self.min_title_tokens == 0 {
            return Err(Error::Config("token thresholds must be positive".into()));
        }
        Ok(())
    }
}

/// True for `$` followed by 1-5 capitals, or 1-5 capitals in parentheses,
/// not extended by further letters.
fn has_stock_symbol(title: &str) -> bool {
    let chars: Vec<char> = title.chars().collect();
    let caps_run = |from: usize| chars[from..].iter().take_while(|c| c.is_ascii_uppercase()).count();
    for (i, &c) in chars.iter().enumerate() {
        let open = match c {
            '$' => None,
            '(' => Some(')'),
            _ => continue,
        };
        let n = caps_run(i + 1);
        if n == 0 || n > 5 {
            continue;
        }
        let next = chars.get(i + 1 + n).copied();
        let ok = match open {
            Some(close) => next == Some(close),
            None => !next.is_some_and(char::is_alphabetic),
        };
        if ok {
            return true;
        }
    }
    false
}

/// Applies the title rules in order and reports the first one violated.
pub fn filter_title(title: &str, cfg: &FilterConfig) -> TitleVerdict {
    let title = title.trim();
    let words = tokenize(title);
    let Some(first) = words.first() else {
        return TitleVerdict::reject(TitleRule::QuestionPrefix);
    };
    let first = normalize_word(first);
    if !cfg
        .question_prefixes
        .iter()
        .any(|p| p.to_lowercase() == first)
    {
        return TitleVerdict::reject(TitleRule::QuestionPrefix);
    }
    if !title.ends_with('?') || title.ends_with("??") {
        return TitleVerdict::reject(TitleRule::QuestionMark);
    }
    let normalized: Vec<String> = words.iter().map(|w| normalize_word(w)).collect();
    let blocked = |w: &str| cfg.blocklist.iter().any(|b| b.to_lowercase() == w);
    if normalized.iter().any(|w| blocked(w)) {
        return TitleVerdict::reject(TitleRule::Blocklist);
    }
    let allowed = |w: &str| cfg.this_allowlist.iter().any(|a| a.to_lowercase() == w);
    for (i, w) in normalized.iter().enumerate() {
        if w == "this" && !normalized.get(i + 1).is_some_and(|next| allowed(next)) {
            return TitleVerdict::reject(TitleRule::BareThis);
        }
    }
    if has_stock_symbol(title) {
        return TitleVerdict::reject(TitleRule::StockSymbol);
    }
    let body = &title[..title.len() - 1];
    if body
        .chars()
        .any(|c| c == '?' || cfg.forbidden_punctuation.contains(c))
    {
        return TitleVerdict::reject(TitleRule::Punctuation);
    }
    if words.len() < cfg.min_title_tokens {
        return TitleVerdict::reject(TitleRule::TitleLength);
    }
    TitleVerdict::accept()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rule(title: &str) -> Option<TitleRule> {
        filter_title(title, &FilterConfig::default()).rejected_by
    }

    #[test]
    fn documented_examples() {
        assert_eq!(rule("How effective is the Pfizer-BioNTech vaccine?"), None);
        assert_eq!(rule("Is this stock a screaming buy??"), Some(TitleRule::QuestionMark));
        assert_eq!(rule("Breaking news from Washington"), Some(TitleRule::QuestionPrefix));
    }

    #[test]
    fn stock_symbols() {
        assert!(has_stock_symbol("Is $AAPL cheap?"));
        assert!(has_stock_symbol("Is Apple (AAPL) cheap?"));
        assert!(!has_stock_symbol("Is Apple (Inc) cheap?"));
        assert!(!has_stock_symbol("Is $ABCDEF a ticker?"));
        assert!(!has_stock_symbol("Is $5 enough?"));
    }

    #[test]
    fn verdict_consistency() {
        for t in ["Why now?", "why is it raining today?", "Where?"] {
            let v = filter_title(t, &FilterConfig::default());
            assert_eq!(v.accepted, v.rejected_by.is_none());
        }
        assert_eq!(rule("Where?"), Some(TitleRule::TitleLength));
    }
}
