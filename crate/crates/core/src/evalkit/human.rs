use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::corpus::{precision_recall_at, Calibration};
use crate::error::{Error, Result};
use crate::lengthdecode::BucketTag;

/// Annotation tasks with true/false answers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    /// The question is self-contained.
    #[serde(rename = "AT-1")]
    At1,
    /// The answer answers the question.
    #[serde(rename = "AT-2")]
    At2,
    #[serde(rename = "AT-3")]
    At3,
    #[serde(rename = "AT-4")]
    At4,
    /// The question captures the gist of the article.
    #[serde(rename = "AT-5")]
    At5,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::At1, Task::At2, Task::At3, Task::At4, Task::At5];
    /// Tasks that must all hold for joint accuracy.
    pub const JOINT: [Task; 3] = [Task::At1, Task::At2, Task::At5];
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AT-{}", *self as usize + 1)
    }
}

/// Votes per HIT.
pub const VOTES_PER_ITEM: usize = 3;

/// One annotated item: a generated pair from one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub item_id: String,
    pub model_id: String,
    #[serde(default)]
    pub bucket: Option<BucketTag>,
    #[serde(default)]
    pub votes: BTreeMap<Task, Vec<bool>>,
    /// Model whose question was picked as best capturing the gist.
    #[serde(default)]
    pub at6_choice: Option<String>,
    /// Model whose question was preferred for a voice assistant.
    #[serde(default)]
    pub at7_choice: Option<String>,
}

impl AnnotationRecord {
    pub fn validate(&self) -> Result<()> {
        for (task, v) in &self.votes {
            if v.len() != VOTES_PER_ITEM {
                return Err(Error::input(format!(
                    "item {}: {task} has {} votes, expected {VOTES_PER_ITEM}",
                    self.item_id,
                    v.len()
                )));
            }
        }
        Ok(())
    }

    /// Majority-voted verdict for `task`.
    pub fn verdict(&self, task: Task) -> Result<bool> {
        let v = self
            .votes
            .get(&task)
            .ok_or_else(|| Error::input(format!("item {} has no {task} votes", self.item_id)))?;
        majority_vote(v)
    }
}

/// True iff at least two of exactly three votes are true.
pub fn majority_vote(votes: &[bool]) -> Result<bool> {
    if votes.len() != VOTES_PER_ITEM {
        return Err(Error::input(format!(
            "expected {VOTES_PER_ITEM} votes, got {}",
            votes.len()
        )));
    }
    Ok(votes.iter().filter(|v| **v).count() >= 2)
}

/// Majority-true count for `task`.
pub fn task_successes(records: &[AnnotationRecord], task: Task) -> Result<usize> {
    let mut n = 0;
    for r in records {
        n += r.verdict(task)? as usize;
    }
    Ok(n)
}

pub fn task_accuracy(records: &[AnnotationRecord], task: Task) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::input("no annotation records"));
    }
    Ok(task_successes(records, task)? as f64 / records.len() as f64)
}

fn joint_successes(records: &[AnnotationRecord]) -> Result<usize> {
    let mut n = 0;
    for r in records {
        let mut all = true;
        for t in Task::JOINT {
            all &= r.verdict(t)?;
        }
        n += all as usize;
    }
    Ok(n)
}

/// Fraction of items judged true on AT-1, AT-2 and AT-5 after majority vote.
pub fn joint_accuracy(records: &[AnnotationRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::input("no annotation records"));
    }
    Ok(joint_successes(records)? as f64 / records.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CiMethod {
    /// Normal approximation, clipped to `[0, 1]`.
    #[default]
    Wald,
    Wilson,
}

fn z_for(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::input(format!("confidence level {level} outside (0, 1)")));
    }
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(n.inverse_cdf(0.5 + level / 2.0))
}

/// Wald interval for a binomial proportion.
pub fn binomial_ci(successes: usize, n: usize, level: f64) -> Result<(f64, f64)> {
    binomial_ci_with(CiMethod::Wald, successes, n, level)
}

pub fn binomial_ci_with(method: CiMethod, successes: usize, n: usize, level: f64) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::input("binomial interval needs n >= 1"));
    }
    if successes > n {
        return Err(Error::input(format!("{successes} successes out of {n}")));
    }
    let z = z_for(level)?;
    let nf = n as f64;
    let p = successes as f64 / nf;
    let (lo, hi) = match method {
        CiMethod::Wald => {
            let half = z * (p * (1.0 - p) / nf).sqrt();
            (p - half, p + half)
        }
        CiMethod::Wilson => {
            let z2 = z * z;
            let denom = 1.0 + z2 / nf;
            let center = (p + z2 / (2.0 * nf)) / denom;
            let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
            (center - half, center + half)
        }
    };
    Ok((lo.clamp(0.0, 1.0), hi.clamp(0.0, 1.0)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preference {
    #[serde(rename = "AT-6")]
    At6,
    #[serde(rename = "AT-7")]
    At7,
}

/// Share of preference votes per model over records that carry a vote.
pub fn preference_proportion(
    records: &[AnnotationRecord],
    which: Preference,
) -> Result<BTreeMap<String, f64>> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in records {
        let choice = match which {
            Preference::At6 => &r.at6_choice,
            Preference::At7 => &r.at7_choice,
        };
        if let Some(m) = choice {
            *counts.entry(m.clone()).or_default() += 1;
        }
    }
    let total: usize = counts.values().sum();
    if total == 0 {
        return Err(Error::input("no preference votes"));
    }
    Ok(counts
        .into_iter()
        .map(|(m, c)| (m, c as f64 / total as f64))
        .collect())
}

/// A proportion with its confidence interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proportion {
    pub value: f64,
    pub successes: usize,
    pub n: usize,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl Proportion {
    pub fn new(successes: usize, n: usize, method: CiMethod, level: f64) -> Result<Self> {
        let (ci_low, ci_high) = binomial_ci_with(method, successes, n, level)?;
        Ok(Self {
            value: successes as f64 / n as f64,
            successes,
            n,
            ci_low,
            ci_high,
        })
    }
}

/// Per-model annotation summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelAnnotations {
    pub items: usize,
    /// Accuracy per task present in every record of the model.
    pub tasks: BTreeMap<Task, Proportion>,
    /// Present when every record carries AT-1, AT-2 and AT-5.
    pub joint_accuracy: Option<Proportion>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSummary {
    pub ci_method: CiMethod,
    pub ci_level: f64,
    pub models: BTreeMap<String, ModelAnnotations>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub at6_preference: Option<BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub at7_preference: Option<BTreeMap<String, f64>>,
}

/// Groups records by model and computes task accuracies, joint accuracy and
/// preference shares.
pub fn aggregate_annotations(
    records: &[AnnotationRecord],
    method: CiMethod,
    level: f64,
) -> Result<AnnotationSummary> {
    for r in records {
        r.validate()?;
    }
    let mut by_model: BTreeMap<&str, Vec<AnnotationRecord>> = BTreeMap::new();
    for r in records {
        by_model.entry(&r.model_id).or_default().push(r.clone());
    }
    let mut models = BTreeMap::new();
    for (model, recs) in by_model {
        let n = recs.len();
        let mut tasks = BTreeMap::new();
        for t in Task::ALL {
            if recs.iter().all(|r| r.votes.contains_key(&t)) {
                tasks.insert(t, Proportion::new(task_successes(&recs, t)?, n, method, level)?);
            }
        }
        let joint = if Task::JOINT.iter().all(|t| tasks.contains_key(t)) {
            Some(Proportion::new(joint_successes(&recs)?, n, method, level)?)
        } else {
            None
        };
        models.insert(
            model.to_string(),
            ModelAnnotations {
                items: n,
                tasks,
                joint_accuracy: joint,
            },
        );
    }
    Ok(AnnotationSummary {
        ci_method: method,
        ci_level: level,
        models,
        at6_preference: preference_proportion(records, Preference::At6).ok(),
        at7_preference: preference_proportion(records, Preference::At7).ok(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub auc: f64,
    pub best_f1: f64,
    pub target_precision: f64,
    /// F1 at the lowest threshold reaching `target_precision`; `None` when
    /// no threshold does.
    pub f1_at_precision: Option<f64>,
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Area under the ROC curve from average ranks (ties count half).
pub fn auc(dev: &[(f64, bool)]) -> Result<f64> {
    crate::corpus::check_dev(dev)?;
    let mut idx: Vec<usize> = (0..dev.len()).collect();
    idx.sort_by(|&a, &b| dev[a].0.total_cmp(&dev[b].0));
    let mut ranks = vec![0.0; dev.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && dev[idx[j + 1]].0 == dev[idx[i]].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    let pos = dev.iter().filter(|d| d.1).count() as f64;
    let neg = dev.len() as f64 - pos;
    let rank_sum: f64 = dev.iter().zip(&ranks).filter(|(d, _)| d.1).map(|(_, r)| r).sum();
    Ok((rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg))
}

pub fn classifier_metrics(dev: &[(f64, bool)], target_precision: f64) -> Result<ClassifierMetrics> {
    let auc = auc(dev)?;
    let mut cuts: Vec<f64> = dev.iter().map(|d| d.0).collect();
    cuts.sort_by(|a, b| b.total_cmp(a));
    cuts.dedup();
    let best_f1 = cuts
        .iter()
        .map(|&c| {
            let (p, r) = precision_recall_at(dev, c);
            f1(p, r)
        })
        .fold(0.0, f64::max);
    let cal: Calibration = crate::corpus::calibrate_threshold(dev, target_precision)?;
    Ok(ClassifierMetrics {
        auc,
        best_f1,
        target_precision,
        f1_at_precision: cal.attained.then(|| f1(cal.precision, cal.recall)),
    })
}
