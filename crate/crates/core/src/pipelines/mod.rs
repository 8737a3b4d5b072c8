//! Model variants: which sequences feed which encoder and decoder, how a QA
//! pair is generated, and how both sub-models are trained.

mod dataset;
mod wiring;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lengthdecode::{
    constrained_generate, truncate_unfinished, BucketTag, DecodeConstraint, DecodeMode,
    LengthBucket,
};
use crate::objectives::{
    dril_step, mle_step, rl_selfcritic_step, LossParts, ObjectiveConfig, ObjectiveKind,
};
use crate::optim::{linear_schedule, Adam, OptimConfig};
use crate::seqcore::{
    Gradients, ModelConfig, Seq2SeqModel, StandaloneDecoder, TokenSequence, Vocabulary,
};

pub use dataset::{FourTuple, ModelSource, QAPair};
pub use wiring::{
    assemble_input, wiring_for, Atom, Bindings, InferOrder, PipelineSpec, Side, Variant,
    MAX_SOURCE_TOKENS,
};

/// Anything that turns a source sequence into content tokens under a
/// length constraint.
pub trait Generator {
    fn vocab(&self) -> &Vocabulary;
    fn generate(
        &self,
        src: &TokenSequence,
        constraint: &DecodeConstraint,
        mode: DecodeMode,
        seed: u64,
    ) -> Result<TokenSequence>;
}

impl Generator for Seq2SeqModel {
    fn vocab(&self) -> &Vocabulary {
        Seq2SeqModel::vocab(self)
    }

    fn generate(
        &self,
        src: &TokenSequence,
        constraint: &DecodeConstraint,
        mode: DecodeMode,
        seed: u64,
    ) -> Result<TokenSequence> {
        constrained_generate(&self.conditioned(src)?, constraint, mode, seed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub mode: DecodeMode,
    pub seed: u64,
    /// Upper bound on generated question length.
    pub question_max_tokens: usize,
    pub max_source_tokens: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_width: 4,
            mode: DecodeMode::Beam,
            seed: 0,
            question_max_tokens: 32,
            max_source_tokens: MAX_SOURCE_TOKENS,
        }
    }
}

/// Intermediate sequences of one generation, for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct PairTrace {
    pub ag_input: TokenSequence,
    pub qg_input: TokenSequence,
    /// Answer tokens after truncation.
    pub answer: TokenSequence,
    pub question: TokenSequence,
}

fn infer_atoms<'s>(side: &'s Side, which: &str) -> Result<&'s [Atom]> {
    side.atoms()
        .ok_or_else(|| Error::input(format!("{which} encoder has no inference wiring")))
}

/// Bindings for one model's vocabulary from text-level values.
fn bind_texts(
    vocab: &Vocabulary,
    article: &str,
    bucket: BucketTag,
    answer: Option<&str>,
    question: Option<&str>,
) -> Bindings {
    Bindings {
        d: Some(vocab.encode(article)),
        s_prime: answer.map(|a| vocab.encode(a)),
        q_prime: question.map(|q| vocab.encode(q)),
        bucket: Some(bucket),
        ..Default::default()
    }
}

/// Generates one question and a bucket-constrained answer for `article`.
pub fn generate_pair(
    ag: &dyn Generator,
    qg: &dyn Generator,
    spec: &PipelineSpec,
    article_id: &str,
    article: &str,
    bucket: LengthBucket,
    cfg: &DecodeConfig,
) -> Result<QAPair> {
    generate_pair_traced(ag, qg, spec, article_id, article, bucket, cfg).map(|(p, _)| p)
}

/// [`generate_pair`] that also returns the encoder inputs it assembled.
pub fn generate_pair_traced(
    ag: &dyn Generator,
    qg: &dyn Generator,
    spec: &PipelineSpec,
    article_id: &str,
    article: &str,
    bucket: LengthBucket,
    cfg: &DecodeConfig,
) -> Result<(QAPair, PairTrace)> {
    if article.trim().is_empty() {
        return Err(Error::input("article is empty"));
    }
    let ag_atoms = infer_atoms(&spec.infer_ag_enc, "answer")?;
    let qg_atoms = infer_atoms(&spec.infer_qg_enc, "question")?;
    let answer_c = DecodeConstraint::new(bucket, cfg.beam_width)?;
    // Questions carry no bucket; the tag is only a label here.
    let question_c = DecodeConstraint::new(
        LengthBucket::new(BucketTag::Lb0, 1, cfg.question_max_tokens)?,
        cfg.beam_width,
    )?;
    let fail = |reason: &str| Error::Generation {
        reason: reason.to_string(),
        article_id: article_id.to_string(),
        bucket: bucket.tag.to_string(),
    };
    let gen_answer = |question: Option<&str>| -> Result<(TokenSequence, TokenSequence)> {
        let v = ag.vocab();
        let b = bind_texts(v, article, bucket.tag, None, question);
        let input = assemble_input(ag_atoms, &b, v, cfg.max_source_tokens)?;
        let raw = ag.generate(&input, &answer_c, cfg.mode, cfg.seed)?;
        let answer = truncate_unfinished(&raw, &bucket, v);
        if answer.is_empty() {
            return Err(fail("empty answer after truncation"));
        }
        if !bucket.contains(answer.len()) {
            return Err(fail(&format!("answer of {} tokens outside bucket", answer.len())));
        }
        Ok((input, answer))
    };
    let gen_question = |answer: Option<&str>| -> Result<(TokenSequence, TokenSequence)> {
        let v = qg.vocab();
        let b = bind_texts(v, article, bucket.tag, answer, None);
        let input = assemble_input(qg_atoms, &b, v, cfg.max_source_tokens)?;
        let question = qg.generate(&input, &question_c, cfg.mode, cfg.seed)?;
        if question.is_empty() {
            return Err(fail("empty question"));
        }
        Ok((input, question))
    };

    let trace = match spec.infer_order {
        InferOrder::AnswerFirst => {
            let (ag_input, answer) = gen_answer(None)?;
            let text = ag.vocab().decode(&answer);
            let (qg_input, question) = gen_question(Some(&text))?;
            PairTrace {
                ag_input,
                qg_input,
                answer,
                question,
            }
        }
        InferOrder::QuestionFirst => {
            let (qg_input, question) = gen_question(None)?;
            let text = qg.vocab().decode(&question);
            let (ag_input, answer) = gen_answer(Some(&text))?;
            PairTrace {
                ag_input,
                qg_input,
                answer,
                question,
            }
        }
    };
    let pair = QAPair {
        question: qg.vocab().decode(&trace.question),
        answer: ag.vocab().decode(&trace.answer),
        bucket: bucket.tag,
        article_id: article_id.to_string(),
    };
    Ok((pair, trace))
}

/// Encoder inputs and decoder targets of one training example.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub ag_src: TokenSequence,
    /// Ground-truth summary followed by `</s>`.
    pub ag_target: TokenSequence,
    pub qg_src: TokenSequence,
    /// Ground-truth question followed by `</s>`.
    pub qg_target: TokenSequence,
}

fn with_eos(mut seq: TokenSequence, vocab: &Vocabulary, cap: usize) -> TokenSequence {
    seq.0.truncate(cap.saturating_sub(1));
    seq.0.push(vocab.eos_id());
    seq
}

/// Assembles the training-time inputs of `spec` for one dataset record.
pub fn training_example(
    spec: &PipelineSpec,
    tuple: &FourTuple,
    vocab: &Vocabulary,
    max_source_tokens: usize,
    max_target_tokens: usize,
) -> Result<TrainingExample> {
    let not_trainable = || Error::input(format!("variant {} is not trainable here", spec.variant));
    let ag_atoms = spec.train_ag_enc.atoms().ok_or_else(not_trainable)?;
    let qg_atoms = spec.train_qg_enc.atoms().ok_or_else(not_trainable)?;
    let b = Bindings {
        q: Some(vocab.encode(&tuple.question)),
        d: Some(vocab.encode(&tuple.article)),
        s: Some(vocab.encode(&tuple.summary)),
        bucket: Some(tuple.length_bucket),
        ..Default::default()
    };
    Ok(TrainingExample {
        ag_src: assemble_input(ag_atoms, &b, vocab, max_source_tokens)?,
        ag_target: with_eos(b.s.clone().expect("bound"), vocab, max_target_tokens),
        qg_src: assemble_input(qg_atoms, &b, vocab, max_source_tokens)?,
        qg_target: with_eos(b.q.clone().expect("bound"), vocab, max_target_tokens),
    })
}

/// Vocabulary over every question, article and summary in `dataset`.
pub fn build_vocab(dataset: &[FourTuple], min_count: usize) -> Result<Vocabulary> {
    Vocabulary::build(
        dataset
            .iter()
            .flat_map(|t| [t.question.as_str(), t.article.as_str(), t.summary.as_str()]),
        min_count,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Model dimensions; `vocab_size` is replaced by the built vocabulary's.
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub ag_optim: OptimConfig,
    pub qg_optim: OptimConfig,
    pub vocab_min_count: usize,
    /// Encoder input cap, further limited by `model.max_positions`.
    pub max_source_tokens: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::new(0),
            objective: ObjectiveConfig::mle(),
            ag_optim: OptimConfig::default(),
            qg_optim: OptimConfig::default(),
            vocab_min_count: 1,
            max_source_tokens: MAX_SOURCE_TOKENS,
        }
    }
}

/// One optimizer step's batch means.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub total_loss: f64,
    pub recon_nll: Option<f64>,
    pub mle_nll: f64,
    pub advantage_mean: Option<f64>,
}

/// CSV with header `step,total_loss,recon_nll,mle_nll,advantage_mean`;
/// absent values are empty fields.
pub fn loss_log_csv(log: &[StepLog]) -> Result<String> {
    let csv_err = |e: csv::Error| Error::input(format!("csv: {e}"));
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(["step", "total_loss", "recon_nll", "mle_nll", "advantage_mean"])
        .map_err(csv_err)?;
    for s in log {
        w.serialize(s).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::input(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[derive(Clone, Debug)]
pub struct TrainedPipeline {
    pub variant: Variant,
    pub ag: Seq2SeqModel,
    pub qg: Seq2SeqModel,
    /// Reconstruction decoder, present for the DRIL variant.
    pub rdec: Option<StandaloneDecoder>,
    pub ag_log: Vec<StepLog>,
    pub qg_log: Vec<StepLog>,
    pub ag_epoch_losses: Vec<f64>,
    pub qg_epoch_losses: Vec<f64>,
}

/// Learning rate and epoch count of the (question, answer) generators of
/// a variant.
pub fn schedule_defaults(variant: Variant) -> ((f64, usize), (f64, usize)) {
    match variant {
        Variant::DS | Variant::DSRl => ((2e-5, 5), (2e-5, 10)),
        Variant::DD | Variant::QDD => ((3e-5, 10), (2e-5, 10)),
        Variant::DSD => ((3e-5, 5), (2e-5, 10)),
        Variant::DSDril => ((2e-5, 5), (3e-5, 10)),
        _ => ((2e-5, 10), (2e-5, 10)),
    }
}

/// The objective a variant trains its answer model with.
pub fn objective_kind(variant: Variant) -> ObjectiveKind {
    match variant {
        Variant::DSDril => ObjectiveKind::Dril,
        Variant::DSRl => ObjectiveKind::Rl,
        _ => ObjectiveKind::Mle,
    }
}

struct Schedule {
    total: usize,
    cfg: OptimConfig,
}

impl Schedule {
    fn lr(&self, step: usize) -> f64 {
        linear_schedule(self.cfg.lr, step, self.cfg.warmup_steps, self.total)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::Training { detail, .. } => Error::Training { step, detail },
        other => other,
    }
}

/// Runs `epochs` of shuffled mini-batches. `eval` returns one example's
/// loss parts and gradients (`[model, extra...]`); `apply` receives the
/// batch-mean gradients and the learning rate.
fn run_epochs(
    n: usize,
    optim: &OptimConfig,
    rng: &mut ChaCha8Rng,
    mut eval: impl FnMut(usize, &mut ChaCha8Rng) -> Result<(LossParts, Vec<Gradients>)>,
    mut apply: impl FnMut(&[Gradients], f64) -> Result<()>,
) -> Result<(Vec<StepLog>, Vec<f64>)> {
    let batches = n.div_ceil(optim.batch_size);
    let sched = Schedule {
        total: optim.epochs * batches,
        cfg: *optim,
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut step = 0;
    for _ in 0..optim.epochs {
        order.shuffle(rng);
        let mut epoch_totals = Vec::with_capacity(n);
        for batch in order.chunks(optim.batch_size) {
            let mut sum: Option<Vec<Gradients>> = None;
            let mut parts = Vec::with_capacity(batch.len());
            for &i in batch {
                let (p, grads) = eval(i, rng).map_err(|e| at_step(e, step))?;
                if !p.total.is_finite() {
                    return Err(Error::Training {
                        step,
                        detail: format!("loss {} on example {i}", p.total),
                    });
                }
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            a.add_scaled(g, 1.0);
                        }
                    }
                }
                parts.push(p);
            }
            let mut grads = sum.expect("nonempty batch");
            let k = batch.len() as f64;
            for g in &mut grads {
                g.scale(1.0 / k);
                if !g.all_finite() {
                    return Err(Error::Training {
                        step,
                        detail: "non-finite gradient".into(),
                    });
                }
            }
            apply(&grads, sched.lr(step))?;
            let opt_mean = |f: &dyn Fn(&LossParts) -> Option<f64>| {
                let v: Vec<f64> = parts.iter().filter_map(f).collect();
                (!v.is_empty()).then(|| mean(&v))
            };
            let totals: Vec<f64> = parts.iter().map(|p| p.total).collect();
            log.push(StepLog {
                step,
                total_loss: mean(&totals),
                recon_nll: opt_mean(&|p| p.recon_nll),
                mle_nll: mean(&parts.iter().map(|p| p.mle_nll).collect::<Vec<_>>()),
                advantage_mean: opt_mean(&|p| p.advantage),
            });
            epoch_totals.extend(totals);
            step += 1;
        }
        epoch_losses.push(mean(&epoch_totals));
    }
    Ok((log, epoch_losses))
}

/// Trains the question generator and then the answer generator of
/// `variant` on `dataset`. The question generator always uses maximum
/// likelihood; the answer generator uses the variant's objective. The
/// self-critic reward reads a frozen copy of the trained question
/// generator. Deterministic for a fixed `seed`.
pub fn train_pipeline(
    variant: Variant,
    dataset: &[FourTuple],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainedPipeline> {
    if !variant.is_trainable() {
        return Err(Error::input(format!("variant {variant} is not trainable here")));
    }
    if dataset.is_empty() {
        return Err(Error::input("dataset is empty"));
    }
    cfg.ag_optim.validate()?;
    cfg.qg_optim.validate()?;
    let kind = objective_kind(variant);
    let objective = if cfg.objective.kind == kind {
        cfg.objective
    } else {
        ObjectiveConfig {
            rng_seed: cfg.objective.rng_seed,
            sample_max_steps: cfg.objective.sample_max_steps,
            ..ObjectiveConfig::for_kind(kind)
        }
    };
    objective.validate()?;

    let vocab = build_vocab(dataset, cfg.vocab_min_count)?;
    let model_cfg = ModelConfig {
        vocab_size: vocab.len(),
        ..cfg.model.clone()
    };
    model_cfg.validate()?;
    let spec = wiring_for(variant);
    let src_cap = cfg.max_source_tokens.min(model_cfg.max_positions);
    let examples = dataset
        .iter()
        .map(|t| training_example(&spec, t, &vocab, src_cap, model_cfg.max_positions))
        .collect::<Result<Vec<_>>>()?;

    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut qg = Seq2SeqModel::new(model_cfg.clone(), vocab.clone(), master.gen())?;
    let mut ag = Seq2SeqModel::new(model_cfg.clone(), vocab.clone(), master.gen())?;
    let rdec_seed: u64 = master.gen();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(master.gen());
    let mut sample_rng = ChaCha8Rng::seed_from_u64(objective.rng_seed ^ master.gen::<u64>());

    let mut qg_opt = Adam::new(qg.params(), cfg.qg_optim);
    let (qg_log, qg_epoch_losses) = {
        let qg_cell = std::cell::RefCell::new(&mut qg);
        run_epochs(
            examples.len(),
            &cfg.qg_optim,
            &mut shuffle_rng,
            |i, _| {
                let ex = &examples[i];
                let out = mle_step(&qg_cell.borrow(), &ex.qg_src, &ex.qg_target)?;
                Ok((out.parts, vec![out.ag_grads]))
            },
            |g, lr| qg_opt.step(qg_cell.borrow_mut().params_mut(), &g[0], lr),
        )?
    };

    let mut rdec = match kind {
        ObjectiveKind::Dril => Some(StandaloneDecoder::new(model_cfg.clone(), vocab.clone(), rdec_seed)?),
        _ => None,
    };
    let frozen_qg = qg.clone();
    let mut ag_opt = Adam::new(ag.params(), cfg.ag_optim);
    let mut rdec_opt = rdec.as_ref().map(|r| Adam::new(r.params(), cfg.ag_optim));
    let (ag_log, ag_epoch_losses) = {
        let state = std::cell::RefCell::new((&mut ag, &mut rdec));
        run_epochs(
            examples.len(),
            &cfg.ag_optim,
            &mut shuffle_rng,
            |i, _| {
                let ex = &examples[i];
                let st = state.borrow();
                let (ag, rdec) = (&*st.0, st.1.as_ref());
                let out = match kind {
                    ObjectiveKind::Mle => mle_step(ag, &ex.ag_src, &ex.ag_target)?,
                    ObjectiveKind::Dril => dril_step(
                        ag,
                        rdec.expect("DRIL has a reconstruction decoder"),
                        &ex.ag_src,
                        &ex.ag_target,
                        &ex.qg_target,
                        &objective,
                        &mut sample_rng,
                    )?,
                    ObjectiveKind::Rl => rl_selfcritic_step(
                        ag,
                        &frozen_qg,
                        &ex.ag_src,
                        &ex.ag_target,
                        &ex.qg_target,
                        &objective,
                        &mut sample_rng,
                    )?,
                };
                let mut grads = vec![out.ag_grads];
                grads.extend(out.rdec_grads);
                Ok((out.parts, grads))
            },
            |g, lr| {
                let mut st = state.borrow_mut();
                ag_opt.step(st.0.params_mut(), &g[0], lr)?;
                if let (Some(r), Some(opt), Some(rg)) = (st.1.as_mut(), rdec_opt.as_mut(), g.get(1)) {
                    opt.step(r.params_mut(), rg, lr)?;
                }
                Ok(())
            },
        )?
    };

    Ok(TrainedPipeline {
        variant,
        ag,
        qg,
        rdec,
        ag_log,
        qg_log,
        ag_epoch_losses,
        qg_epoch_losses,
    })
}
