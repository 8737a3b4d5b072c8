use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    filter_title, generate_candidates, score_pair, select_best, strip_questions, tokenize,
    Article, CandidateSummary, FilterConfig, PairClassifier, Summarizer, TitleRule,
};
use crate::error::{Error, Result};
use crate::lengthdecode::{BucketTable, BucketTag};
use crate::pipelines::{FourTuple, ModelSource};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub filter: FilterConfig,
    pub buckets: BucketTable,
    pub beam_width: usize,
    /// Minimum classifier score for a pair to be kept.
    pub threshold: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            filter: FilterConfig::default(),
            buckets: BucketTable::default(),
            beam_width: 4,
            threshold: 0.5,
        }
    }
}

/// Candidate bookkeeping for one (bucket, source) cell.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BucketSourceStats {
    pub bucket: Option<BucketTag>,
    pub source: Option<ModelSource>,
    /// Candidates whose truncated length landed in this bucket.
    pub fell_in: usize,
    pub accepted: usize,
    /// `accepted / fell_in`, 0 when nothing fell in.
    pub acceptance_rate: f64,
    /// Share of this bucket's accepted tuples that came from this source.
    pub proportion: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub articles_in: usize,
    pub articles_kept: usize,
    /// Rejected articles per rule name.
    pub rejections: BTreeMap<String, usize>,
    pub cells: Vec<BucketSourceStats>,
    pub tuples: usize,
}

/// Filters articles, generates and scores per-bucket candidates and keeps the
/// best candidate per (article, bucket) that clears the threshold.
///
/// Candidates from every requested bucket are pooled and grouped by their
/// reassigned bucket, so each article yields at most one tuple per bucket.
pub fn build_dataset(
    articles: &[Article],
    cfg: &DatasetConfig,
    summarizers: &[&dyn Summarizer],
    classifier: &dyn PairClassifier,
) -> Result<(Vec<FourTuple>, DatasetReport)> {
    cfg.filter.validate()?;
    if summarizers.is_empty() {
        return Err(Error::input("at least one summarizer is required"));
    }
    let mut report = DatasetReport {
        articles_in: articles.len(),
        ..Default::default()
    };
    let sources: Vec<ModelSource> = {
        let mut s: Vec<ModelSource> = summarizers.iter().map(|s| s.source()).collect();
        s.sort();
        s.dedup();
        s
    };
    let mut cells: BTreeMap<(BucketTag, ModelSource), (usize, usize)> = BTreeMap::new();
    for tag in BucketTag::ALL {
        for &src in &sources {
            cells.insert((tag, src), (0, 0));
        }
    }
    let mut tuples = Vec::new();

    for article in articles {
        let rejected = |report: &mut DatasetReport, rule: TitleRule| {
            *report.rejections.entry(rule.to_string()).or_default() += 1;
        };
        let verdict = filter_title(&article.title, &cfg.filter);
        if let Some(rule) = verdict.rejected_by {
            rejected(&mut report, rule);
            continue;
        }
        let question = article.title.trim();
        let body = strip_questions(&article.body);
        if tokenize(&body).len() < cfg.filter.min_article_tokens {
            rejected(&mut report, TitleRule::ArticleLength);
            continue;
        }
        if body.contains(question) {
            rejected(&mut report, TitleRule::QuestionInBody);
            continue;
        }
        report.articles_kept += 1;

        let mut pool: Vec<CandidateSummary> = Vec::new();
        for tag in BucketTag::ALL {
            let bucket = cfg.buckets.get(tag);
            pool.extend(generate_candidates(
                &body,
                question,
                bucket,
                cfg.beam_width,
                &cfg.buckets,
                summarizers,
            )?);
        }
        for c in &mut pool {
            c.score = Some(score_pair(question, &c.text, classifier)?);
        }
        for tag in BucketTag::ALL {
            let group: Vec<CandidateSummary> = pool
                .iter()
                .filter(|c| c.bucket.map(|b| b.tag) == Some(tag))
                .cloned()
                .collect();
            for c in &group {
                cells.entry((tag, c.source)).or_default().0 += 1;
            }
            let Some(i) = select_best(&group, cfg.threshold) else {
                continue;
            };
            let best = &group[i];
            cells.entry((tag, best.source)).or_default().1 += 1;
            tuples.push(FourTuple {
                question: question.to_string(),
                article: body.clone(),
                summary: best.text.clone(),
                length_bucket: tag,
                score: best.score.expect("scored above"),
                model_source: best.source,
                article_id: Some(article.id.clone()),
            });
        }
    }

    let mut per_bucket: BTreeMap<BucketTag, usize> = BTreeMap::new();
    for ((tag, _), (_, acc)) in &cells {
        *per_bucket.entry(*tag).or_default() += acc;
    }
    report.cells = cells
        .into_iter()
        .map(|((tag, src), (fell_in, accepted))| {
            let bucket_total = per_bucket[&tag];
            BucketSourceStats {
                bucket: Some(tag),
                source: Some(src),
                fell_in,
                accepted,
                acceptance_rate: if fell_in == 0 { 0.0 } else { accepted as f64 / fell_in as f64 },
                proportion: if bucket_total == 0 {
                    0.0
                } else {
                    accepted as f64 / bucket_total as f64
                },
            }
        })
        .collect();
    report.tuples = tuples.len();
    Ok((tuples, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{LeadSummarizer, OverlapClassifier};

    fn article(id: &str, title: &str, body: &str) -> Article {
        Article {
            id: id.into(),
            title: title.into(),
            body: body.into(),
            source_domain: "example.com".into(),
            date: "2021-01-01".into(),
        }
    }

    #[test]
    fn empty_input_gives_zeroed_report() {
        let lead = LeadSummarizer::default();
        let (tuples, report) =
            build_dataset(&[], &DatasetConfig::default(), &[&lead], &OverlapClassifier).unwrap();
        assert!(tuples.is_empty());
        assert_eq!(report.articles_in, 0);
        assert!(report.cells.iter().all(|c| c.fell_in == 0 && c.accepted == 0));
        assert_eq!(report.cells.len(), 3);
    }

    #[test]
    fn rejections_are_counted_by_rule() {
        let lead = LeadSummarizer::default();
        let arts = [
            article("1", "Breaking news today", "x."),
            article("2", "Why is it short?", "too short."),
        ];
        let (_, report) =
            build_dataset(&arts, &DatasetConfig::default(), &[&lead], &OverlapClassifier).unwrap();
        assert_eq!(report.rejections["question_prefix"], 1);
        assert_eq!(report.rejections["article_length"], 1);
        assert_eq!(report.articles_kept, 0);
    }

    #[test]
    fn emitted_tuples_satisfy_invariants() {
        let sentence = |i: usize| format!("Solar panels get cheaper in region{i} every year.");
        let body: Vec<String> = (0..20).map(sentence).collect();
        let arts = [article("a", "Why do solar panels get cheaper?", &body.join(" "))];
        let cfg = DatasetConfig {
            threshold: 0.1,
            ..Default::default()
        };
        let lead = LeadSummarizer::default();
        let (tuples, report) = build_dataset(&arts, &cfg, &[&lead], &OverlapClassifier).unwrap();
        assert_eq!(tuples.len(), 3);
        for t in &tuples {
            t.validate(&cfg.buckets).unwrap();
            assert!(t.score >= cfg.threshold);
            assert!(!t.article.contains(&t.question));
        }
        assert_eq!(report.tuples, 3);
        let again = build_dataset(&arts, &cfg, &[&lead], &OverlapClassifier).unwrap();
        assert_eq!(again.0, tuples);
    }
}
