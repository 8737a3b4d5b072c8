use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use qapair::config::RunConfig;
use qapair::corpus::{
    build_dataset, calibrate_threshold, tokenize, Article, Calibration, LeadSummarizer,
    LogisticClassifier, OverlapClassifier, PairClassifier, QuestionFocusedSummarizer, Summarizer,
};
use qapair::evalkit::{
    aggregate_annotations, classifier_metrics, evaluate, AnnotationRecord, ClassifierMetrics,
    Reference,
};
use qapair::jsonl;
use qapair::lengthdecode::BucketTag;
use qapair::optim::OptimConfig;
use qapair::pipelines::{
    generate_pair, loss_log_csv, train_pipeline, wiring_for, FourTuple, QAPair, Variant,
};
use qapair::seqcore::{write_atomic, Seq2SeqModel};
use qapair::Error;

use crate::{Command, Common};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const DATASET_REPORT_FILE: &str = "dataset_report.json";
pub const AG_CHECKPOINT: &str = "ag.ckpt";
pub const QG_CHECKPOINT: &str = "qg.ckpt";
pub const RDEC_CHECKPOINT: &str = "rdec.ckpt";
pub const AG_LOG_FILE: &str = "ag_log.csv";
pub const QG_LOG_FILE: &str = "qg_log.csv";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const ANNOTATIONS_REPORT_FILE: &str = "annotations_report.json";

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    bucket: Option<BucketTag>,
}

impl Ctx {
    fn new(common: &Common) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        if let Some(v) = common.variant {
            cfg.variant = v;
        }
        cfg.validate()?;
        let out = common
            .out
            .clone()
            .or_else(|| cfg.reports.clone())
            .unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self {
            cfg,
            out,
            bucket: common.bucket,
        })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn classifier(&self) -> Box<dyn PairClassifier> {
        match self.cfg.classifier_weights {
            Some(weights) => Box::new(LogisticClassifier { weights }),
            None => Box::new(OverlapClassifier),
        }
    }

    fn buckets(&self) -> Vec<BucketTag> {
        match self.bucket {
            Some(b) => vec![b],
            None => BucketTag::ALL.to_vec(),
        }
    }
}

/// Flag value first, then the config key; missing files are input errors.
fn input_path(flag: Option<PathBuf>, key: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    let path = flag
        .or_else(|| key.clone())
        .ok_or_else(|| Error::input(format!("no {name} path given (flag or config key `{name}`)")))?;
    if !path.exists() {
        return Err(Error::input(format!("{name} file {} does not exist", path.display())).into());
    }
    Ok(path)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

pub fn run(common: &Common, command: Command) -> Result<()> {
    let ctx = Ctx::new(common)?;
    match command {
        Command::BuildDataset { articles } => {
            let path = input_path(articles, &ctx.cfg.articles, "articles")?;
            build(&ctx, &path)
        }
        Command::Train { dataset } => {
            let path = input_path(dataset, &ctx.cfg.dataset, "dataset")?;
            train(&ctx, &path)
        }
        Command::Generate {
            articles,
            checkpoints,
        } => {
            let path = input_path(articles, &ctx.cfg.articles, "articles")?;
            let dir = input_path(checkpoints, &ctx.cfg.checkpoints, "checkpoints")?;
            generate(&ctx, &path, &dir)
        }
        Command::Evaluate {
            pairs,
            references,
            annotations,
        } => {
            let path = input_path(pairs, &ctx.cfg.pairs, "pairs")?;
            let refs = match references.or_else(|| ctx.cfg.references.clone()) {
                Some(p) => Some(input_path(Some(p), &None, "references")?),
                None => None,
            };
            let anns = match annotations.or_else(|| ctx.cfg.annotations.clone()) {
                Some(p) => Some(input_path(Some(p), &None, "annotations")?),
                None => None,
            };
            eval(&ctx, &path, refs.as_deref(), anns.as_deref())
        }
        Command::CalibrateThreshold { dev } => {
            let path = input_path(dev, &ctx.cfg.dev, "dev")?;
            calibrate(&ctx, &path)
        }
        Command::AggregateAnnotations { annotations } => {
            let path = input_path(annotations, &ctx.cfg.annotations, "annotations")?;
            aggregate(&ctx, &path)
        }
    }
}

fn build(ctx: &Ctx, articles_path: &Path) -> Result<()> {
    let articles: Vec<Article> = jsonl::read(articles_path)?;
    let lead = LeadSummarizer::default();
    let focused = QuestionFocusedSummarizer::default();
    let summarizers: [&dyn Summarizer; 2] = [&lead, &focused];
    let classifier = ctx.classifier();
    let (tuples, report) =
        build_dataset(&articles, &ctx.cfg.dataset()?, &summarizers, classifier.as_ref())?;
    jsonl::write(&ctx.out(DATASET_FILE), &tuples)?;
    write_json(&ctx.out(DATASET_REPORT_FILE), &report)?;
    println!(
        "{} of {} articles kept, {} tuples written to {}",
        report.articles_kept,
        report.articles_in,
        report.tuples,
        ctx.out(DATASET_FILE).display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    variant: Variant,
    seed: u64,
    vocab_size: usize,
    examples: usize,
    ag_optim: OptimConfig,
    qg_optim: OptimConfig,
    ag_steps: usize,
    qg_steps: usize,
    ag_epoch_losses: Vec<f64>,
    qg_epoch_losses: Vec<f64>,
}

fn train(ctx: &Ctx, dataset_path: &Path) -> Result<()> {
    let dataset: Vec<FourTuple> = jsonl::read(dataset_path)?;
    let table = ctx.cfg.buckets()?;
    for (i, t) in dataset.iter().enumerate() {
        t.validate(&table)
            .with_context(|| format!("{}: record {}", dataset_path.display(), i + 1))?;
    }
    let variant = ctx.cfg.variant;
    let trained = train_pipeline(variant, &dataset, &ctx.cfg.train(), ctx.cfg.seed)?;
    trained.ag.save(&ctx.out(AG_CHECKPOINT))?;
    trained.qg.save(&ctx.out(QG_CHECKPOINT))?;
    if let Some(rdec) = &trained.rdec {
        rdec.save(&ctx.out(RDEC_CHECKPOINT))?;
    }
    write_atomic(&ctx.out(AG_LOG_FILE), loss_log_csv(&trained.ag_log)?.as_bytes())?;
    write_atomic(&ctx.out(QG_LOG_FILE), loss_log_csv(&trained.qg_log)?.as_bytes())?;
    let summary = TrainSummary {
        variant,
        seed: ctx.cfg.seed,
        vocab_size: trained.ag.vocab().len(),
        examples: dataset.len(),
        ag_optim: ctx.cfg.ag_optim(),
        qg_optim: ctx.cfg.qg_optim(),
        ag_steps: trained.ag_log.len(),
        qg_steps: trained.qg_log.len(),
        ag_epoch_losses: trained.ag_epoch_losses,
        qg_epoch_losses: trained.qg_epoch_losses,
    };
    write_json(&ctx.out(TRAIN_SUMMARY_FILE), &summary)?;
    println!(
        "trained {variant} on {} examples ({} AG steps, {} QG steps)",
        summary.examples, summary.ag_steps, summary.qg_steps
    );
    Ok(())
}

fn generate(ctx: &Ctx, articles_path: &Path, ckpt_dir: &Path) -> Result<()> {
    let variant = ctx.cfg.variant;
    if !variant.is_trainable() {
        return Err(Error::input(format!("variant {variant} has no local checkpoints")).into());
    }
    let ag = Seq2SeqModel::load(&ckpt_dir.join(AG_CHECKPOINT))?;
    let qg = Seq2SeqModel::load(&ckpt_dir.join(QG_CHECKPOINT))?;
    let articles: Vec<Article> = jsonl::read(articles_path)?;
    let spec = wiring_for(variant);
    let table = ctx.cfg.buckets()?;
    let decode = ctx.cfg.decode();
    let min_tokens = ctx.cfg.min_article_tokens;

    let mut pairs: Vec<QAPair> = Vec::new();
    let mut failures = 0usize;
    for article in &articles {
        let n = tokenize(&article.body).len();
        if n < min_tokens {
            warn!("skipping article {}: {n} tokens, below {min_tokens}", article.id);
            continue;
        }
        for tag in ctx.buckets() {
            match generate_pair(&ag, &qg, &spec, &article.id, &article.body, table.get(tag), &decode) {
                Ok(p) => pairs.push(p),
                Err(e) => {
                    failures += 1;
                    warn!("article {} bucket {tag}: {e}", article.id);
                }
            }
        }
    }
    jsonl::write(&ctx.out(PAIRS_FILE), &pairs)?;
    info!("{failures} generation failures");
    println!("{} pairs written to {}", pairs.len(), ctx.out(PAIRS_FILE).display());
    Ok(())
}

fn eval(ctx: &Ctx, pairs_path: &Path, refs: Option<&Path>, anns: Option<&Path>) -> Result<()> {
    let pairs: Vec<QAPair> = jsonl::read(pairs_path)?;
    let references: Option<Vec<Reference>> = refs.map(jsonl::read).transpose()?;
    let annotations: Option<Vec<AnnotationRecord>> = anns.map(jsonl::read).transpose()?;
    let classifier = ctx.classifier();
    let report = evaluate(
        &pairs,
        classifier.as_ref(),
        references.as_deref(),
        annotations
            .as_deref()
            .map(|a| (a, ctx.cfg.ci_method, ctx.cfg.ci_level)),
    )?;
    write_json(&ctx.out(REPORT_FILE), &report)?;
    println!("QACS {:.4} over {} pairs", report.qacs, report.pairs);
    Ok(())
}

/// One labelled dev pair; `score` wins over re-scoring the texts.
#[derive(Deserialize)]
struct DevRecord {
    #[serde(default)]
    score: Option<f64>,
    #[serde(default)]
    question: Option<String>,
    #[serde(default)]
    answer: Option<String>,
    label: bool,
}

#[derive(Serialize)]
struct CalibrationReport {
    calibration: Calibration,
    metrics: ClassifierMetrics,
}

fn calibrate(ctx: &Ctx, dev_path: &Path) -> Result<()> {
    let records: Vec<DevRecord> = jsonl::read(dev_path)?;
    let classifier = ctx.classifier();
    let dev = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let score = match (r.score, &r.question, &r.answer) {
                (Some(s), _, _) => s,
                (None, Some(q), Some(a)) => classifier.score(q, a)?,
                _ => {
                    return Err(Error::Parse {
                        path: dev_path.to_path_buf(),
                        line: i + 1,
                        message: "record needs a score or a question and answer".into(),
                    })
                }
            };
            Ok((score, r.label))
        })
        .collect::<qapair::Result<Vec<_>>>()?;
    let target = ctx.cfg.target_precision;
    let report = CalibrationReport {
        calibration: calibrate_threshold(&dev, target)?,
        metrics: classifier_metrics(&dev, target)?,
    };
    write_json(&ctx.out(CALIBRATION_FILE), &report)?;
    let c = report.calibration;
    if !c.attained {
        warn!("target precision {target} not reached; best precision {:.4}", c.precision);
    }
    println!(
        "threshold {} (precision {:.4}, recall {:.4})",
        c.threshold, c.precision, c.recall
    );
    Ok(())
}

fn aggregate(ctx: &Ctx, path: &Path) -> Result<()> {
    let records: Vec<AnnotationRecord> = jsonl::read(path)?;
    let summary = aggregate_annotations(&records, ctx.cfg.ci_method, ctx.cfg.ci_level)?;
    write_json(&ctx.out(ANNOTATIONS_REPORT_FILE), &summary)?;
    println!("{} records over {} models", records.len(), summary.models.len());
    Ok(())
}
