//! Training objectives for the answer generator: maximum likelihood,
//! question reconstruction from sampled answers (DRIL) and self-critical
//! policy gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Reduction, Tape};
use crate::error::{Error, Result};
use crate::seqcore::{
    collect_grads, graph, shift_right, Gradients, Seq2SeqModel, StandaloneDecoder, TokenId,
    TokenSequence,
};

/// Weight of the reconstruction term in the DRIL mixture.
pub const DRIL_LAMBDA: f64 = 0.3;
/// Weight of the policy term in the self-critic mixture.
pub const RL_LAMBDA: f64 = 0.1;
/// Cap on sampled answer length; the largest bucket's maximum.
pub const DEFAULT_SAMPLE_MAX_STEPS: usize = 72;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectiveKind {
    #[serde(rename = "MLE")]
    Mle,
    #[serde(rename = "DRIL")]
    Dril,
    #[serde(rename = "RL")]
    Rl,
}

impl std::str::FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "MLE" => Ok(Self::Mle),
            "DRIL" => Ok(Self::Dril),
            "RL" => Ok(Self::Rl),
            _ => Err(Error::Config(format!("unknown objective {s:?}"))),
        }
    }
}

/// How gradients treat the sampled answer tokens. Only stop-gradient is
/// implemented: the token ids are constants and gradient reaches the answer
/// model through the decoder hidden states alone.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleGradient {
    #[default]
    Stop,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    /// Weight of the auxiliary term; MLE gets `1 - lambda`.
    pub lambda: f64,
    pub sample_max_steps: usize,
    pub rng_seed: u64,
    #[serde(default)]
    pub sample_gradient: SampleGradient,
}

impl ObjectiveConfig {
    pub fn mle() -> Self {
        Self {
            kind: ObjectiveKind::Mle,
            lambda: 0.0,
            sample_max_steps: DEFAULT_SAMPLE_MAX_STEPS,
            rng_seed: 0,
            sample_gradient: SampleGradient::Stop,
        }
    }

    pub fn dril() -> Self {
        Self {
            kind: ObjectiveKind::Dril,
            lambda: DRIL_LAMBDA,
            ..Self::mle()
        }
    }

    pub fn rl() -> Self {
        Self {
            kind: ObjectiveKind::Rl,
            lambda: RL_LAMBDA,
            ..Self::mle()
        }
    }

    /// Defaults for `kind`.
    pub fn for_kind(kind: ObjectiveKind) -> Self {
        match kind {
            ObjectiveKind::Mle => Self::mle(),
            ObjectiveKind::Dril => Self::dril(),
            ObjectiveKind::Rl => Self::rl(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.sample_max_steps == 0 {
            return Err(Error::Config("sample_max_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Scalar parts of one objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub mle_nll: f64,
    pub recon_nll: Option<f64>,
    pub advantage: Option<f64>,
    /// The sampled answer was empty twice and the step used MLE alone.
    pub fell_back: bool,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub parts: LossParts,
    pub ag_grads: Gradients,
    /// Reconstruction decoder gradient (DRIL only).
    pub rdec_grads: Option<Gradients>,
    /// Gradient reaching the frozen question generator (RL only; all zero).
    pub qg_grads: Option<Gradients>,
    pub sample: Option<TokenSequence>,
}

fn finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Training {
            step: 0,
            detail: format!("{what} is {value}"),
        })
    }
}

fn targets(seq: &[TokenId]) -> Vec<Option<usize>> {
    seq.iter().map(|&id| Some(id)).collect()
}

/// Teacher-forced NLL of `target` given `src` with its gradient.
pub fn mle_step(model: &Seq2SeqModel, src: &TokenSequence, target: &TokenSequence) -> Result<StepOutput> {
    let (loss, grads) = model.loss_and_grads(src, target)?;
    finite(loss, "MLE loss")?;
    Ok(StepOutput {
        parts: LossParts {
            total: loss,
            mle_nll: loss,
            ..Default::default()
        },
        ag_grads: grads,
        rdec_grads: None,
        qg_grads: None,
        sample: None,
    })
}

/// Question-generator MLE; identical to [`mle_step`] on the QG wiring.
pub fn qg_mle_step(qg: &Seq2SeqModel, src: &TokenSequence, question: &TokenSequence) -> Result<StepOutput> {
    mle_step(qg, src, question)
}

/// DRIL loss for a given sampled answer `sample` (as emitted, possibly
/// ending in `</s>`).
///
/// `total = lambda * recon + (1 - lambda) * mle`, where `mle` is the
/// teacher-forced NLL of `target` and `recon` the NLL of `question` under
/// `rdec` cross-attending to the answer decoder's states over `sample`.
pub fn dril_loss_with_sample(
    ag: &Seq2SeqModel,
    rdec: &StandaloneDecoder,
    src: &TokenSequence,
    target: &TokenSequence,
    question: &TokenSequence,
    sample: &[TokenId],
    lambda: f64,
) -> Result<StepOutput> {
    if sample.is_empty() {
        return Err(Error::input("sampled answer is empty"));
    }
    if rdec.config().d_model != ag.config().d_model {
        return Err(Error::Config("reconstruction decoder width differs from answer model".into()));
    }
    rdec.check_target(sample.len(), question)?;
    let mut t = Tape::new();
    let b = ag.bind(&mut t, true);
    let (rnodes, rleaves) = rdec.bind(&mut t, true);

    ag.check_seq(src, "source")?;
    ag.check_seq(target, "target")?;
    ag.check_seq(sample, "sample")?;
    let valid = ag.src_valid(src);
    let memory = graph::encode(&mut t, &b.enc, ag.config(), src, &valid);

    let input = shift_right(ag.vocab().bos_id(), target);
    let states = graph::decode_states(&mut t, &b.dec, ag.config(), memory, &valid, &input);
    let logits = graph::project(&mut t, &b.dec, states);
    let mle = t.nll(logits, &targets(target), Reduction::Mean);

    // Second decoder pass over the sampled tokens, same encoder output.
    let input = shift_right(ag.vocab().bos_id(), sample);
    let c_dec = graph::decode_states(&mut t, &b.dec, ag.config(), memory, &valid, &input);
    let rlogits = rdec.logits_graph(&mut t, &rnodes, c_dec, sample.len(), question);
    let recon = t.nll(rlogits, &targets(question), Reduction::Mean);

    let a = t.scale(recon, lambda);
    let m = t.scale(mle, 1.0 - lambda);
    let total = t.add(a, m);
    let mut grads = t.backward(total);
    let ag_grads = collect_grads(&t, &b.leaves, &mut grads);
    let rdec_grads = collect_grads(&t, &rleaves, &mut grads);
    Ok(StepOutput {
        parts: LossParts {
            total: finite(t.scalar(total), "DRIL loss")?,
            mle_nll: t.scalar(mle),
            recon_nll: Some(t.scalar(recon)),
            advantage: None,
            fell_back: false,
        },
        ag_grads,
        rdec_grads: Some(rdec_grads),
        qg_grads: None,
        sample: Some(TokenSequence(sample.to_vec())),
    })
}

/// Samples an answer, retrying once when it has no content tokens.
fn sample_nonempty<R: Rng + ?Sized>(
    ag: &Seq2SeqModel,
    src: &TokenSequence,
    max_steps: usize,
    rng: &mut R,
) -> Result<Option<TokenSequence>> {
    let enc = ag.encode(src)?;
    let eos = ag.vocab().eos_id();
    for _ in 0..2 {
        let s = ag.decode_sample(&enc, max_steps, rng)?;
        if !s.content(eos).is_empty() {
            return Ok(Some(s.emitted));
        }
    }
    Ok(None)
}

fn fallback(ag: &Seq2SeqModel, src: &TokenSequence, target: &TokenSequence) -> Result<StepOutput> {
    log::warn!("sampled answer empty twice; using MLE only for this example");
    let mut out = mle_step(ag, src, target)?;
    out.parts.fell_back = true;
    Ok(out)
}

/// One DRIL evaluation: samples `S'` from the answer model, then applies
/// [`dril_loss_with_sample`].
pub fn dril_step<R: Rng + ?Sized>(
    ag: &Seq2SeqModel,
    rdec: &StandaloneDecoder,
    src: &TokenSequence,
    target: &TokenSequence,
    question: &TokenSequence,
    cfg: &ObjectiveConfig,
    rng: &mut R,
) -> Result<StepOutput> {
    cfg.validate()?;
    match sample_nonempty(ag, src, cfg.sample_max_steps, rng)? {
        Some(sample) => dril_loss_with_sample(ag, rdec, src, target, question, &sample, cfg.lambda),
        None => {
            let mut out = fallback(ag, src, target)?;
            out.rdec_grads = Some(rdec.params().zeros_like());
            Ok(out)
        }
    }
}

/// A stochastic sequence policy with differentiable log-probabilities.
pub trait SequencePolicy {
    fn sample(&self, rng: &mut dyn rand::RngCore, max_steps: usize) -> Result<Vec<TokenId>>;
    fn greedy(&self, max_steps: usize) -> Result<Vec<TokenId>>;
    /// `sum_t log p(seq_t | seq_<t)` and its gradient.
    fn log_prob_grad(&self, seq: &[TokenId]) -> Result<(f64, Gradients)>;
}

#[derive(Clone, Debug)]
pub struct SelfCritic {
    pub sampled: Vec<TokenId>,
    pub greedy: Vec<TokenId>,
    pub reward_sampled: f64,
    pub reward_greedy: f64,
    pub advantage: f64,
    /// `-advantage * log p(sampled)`.
    pub policy_loss: f64,
    pub grads: Gradients,
}

/// Self-critical estimate: one sample, greedy baseline under the same step
/// cap. When the advantage is zero the policy term and its gradient are
/// exactly zero.
pub fn self_critic<P: SequencePolicy + ?Sized>(
    policy: &P,
    reward: &mut dyn FnMut(&[TokenId]) -> Result<f64>,
    rng: &mut dyn rand::RngCore,
    max_steps: usize,
) -> Result<SelfCritic> {
    let sampled = policy.sample(rng, max_steps)?;
    let greedy = policy.greedy(max_steps)?;
    let reward_sampled = reward(&sampled)?;
    let reward_greedy = if greedy == sampled {
        reward_sampled
    } else {
        reward(&greedy)?
    };
    let advantage = reward_sampled - reward_greedy;
    let (log_prob, mut grads) = policy.log_prob_grad(&sampled)?;
    let policy_loss = if advantage == 0.0 {
        grads = grads.zeros_like();
        0.0
    } else {
        grads.scale(-advantage);
        -advantage * log_prob
    };
    Ok(SelfCritic {
        sampled,
        greedy,
        reward_sampled,
        reward_greedy,
        advantage,
        policy_loss,
        grads,
    })
}

/// The answer model conditioned on one source, as a sequence policy.
struct AnswerPolicy<'m> {
    model: &'m Seq2SeqModel,
    src: &'m TokenSequence,
    enc: crate::seqcore::EncoderStates,
}

impl SequencePolicy for AnswerPolicy<'_> {
    fn sample(&self, rng: &mut dyn rand::RngCore, max_steps: usize) -> Result<Vec<TokenId>> {
        Ok(self.model.decode_sample(&self.enc, max_steps, rng)?.emitted.0)
    }

    fn greedy(&self, max_steps: usize) -> Result<Vec<TokenId>> {
        Ok(self.model.decode_greedy(&self.enc, max_steps)?.emitted.0)
    }

    fn log_prob_grad(&self, seq: &[TokenId]) -> Result<(f64, Gradients)> {
        let (nll, mut g) = sequence_nll_grads(self.model, self.src, seq)?;
        g.scale(-1.0);
        Ok((-nll, g))
    }
}

/// Summed (not averaged) token NLL of `seq` given `src`, with gradient.
fn sequence_nll_grads(model: &Seq2SeqModel, src: &TokenSequence, seq: &[TokenId]) -> Result<(f64, Gradients)> {
    let mut t = Tape::new();
    let b = model.bind(&mut t, true);
    let (_, logits) = model.forward_graph(&mut t, &b, src, seq)?;
    let loss = t.nll(logits, &targets(seq), Reduction::Sum);
    let mut grads = t.backward(loss);
    Ok((t.scalar(loss), collect_grads(&t, &b.leaves, &mut grads)))
}

/// Reward of an emitted answer: minus the mean NLL of `question` under the
/// frozen question generator reading the answer's content tokens. An answer
/// with no content is read as a lone `</s>`. Also returns the gradient that
/// reaches the question generator, which is zero because it is bound as
/// constants.
pub fn question_reward(
    frozen_qg: &Seq2SeqModel,
    answer: &[TokenId],
    question: &TokenSequence,
) -> Result<(f64, Gradients)> {
    let eos = frozen_qg.vocab().eos_id();
    let content: Vec<TokenId> = answer.iter().copied().take_while(|&t| t != eos).collect();
    let src = if content.is_empty() { vec![eos] } else { content };
    let mut t = Tape::new();
    let b = frozen_qg.bind(&mut t, false);
    let (_, logits) = frozen_qg.forward_graph(&mut t, &b, &src, question)?;
    let loss = t.nll(logits, &targets(question), Reduction::Mean);
    let mut grads = t.backward(loss);
    let g = collect_grads(&t, &b.leaves, &mut grads);
    Ok((-finite(t.scalar(loss), "reward NLL")?, g))
}

/// Self-critic surrogate for a fixed sample and advantage:
/// `lambda * (-advantage * log p(sample)) + (1 - lambda) * mle`.
pub fn rl_surrogate_with_sample(
    ag: &Seq2SeqModel,
    src: &TokenSequence,
    target: &TokenSequence,
    sample: &[TokenId],
    advantage: f64,
    lambda: f64,
) -> Result<(f64, Gradients)> {
    let (nll, mut pg) = sequence_nll_grads(ag, src, sample)?;
    let (mle, mg) = ag.loss_and_grads(src, target)?;
    pg.scale(lambda * advantage);
    pg.add_scaled(&mg, 1.0 - lambda);
    Ok((lambda * advantage * nll + (1.0 - lambda) * mle, pg))
}

/// One self-critic evaluation with reward from `frozen_qg`.
#[allow(clippy::too_many_arguments)]
pub fn rl_selfcritic_step<R: rand::RngCore>(
    ag: &Seq2SeqModel,
    frozen_qg: &Seq2SeqModel,
    src: &TokenSequence,
    target: &TokenSequence,
    question: &TokenSequence,
    cfg: &ObjectiveConfig,
    rng: &mut R,
) -> Result<StepOutput> {
    cfg.validate()?;
    let policy = AnswerPolicy {
        model: ag,
        src,
        enc: ag.encode(src)?,
    };
    let eos = ag.vocab().eos_id();
    let mut qg_grads = frozen_qg.params().zeros_like();
    let mut reward = |ans: &[TokenId]| -> Result<f64> {
        let (r, g) = question_reward(frozen_qg, ans, question)?;
        qg_grads.add_scaled(&g, 1.0);
        Ok(r)
    };
    let mut sc = None;
    for _ in 0..2 {
        let est = self_critic(&policy, &mut reward, rng, cfg.sample_max_steps)?;
        if est.sampled.first().is_some_and(|&t| t != eos) {
            sc = Some(est);
            break;
        }
    }
    let Some(sc) = sc else {
        let mut out = fallback(ag, src, target)?;
        out.qg_grads = Some(qg_grads);
        return Ok(out);
    };
    let (mle, mut grads) = ag.loss_and_grads(src, target)?;
    grads.scale(1.0 - cfg.lambda);
    grads.add_scaled(&sc.grads, cfg.lambda);
    let total = cfg.lambda * sc.policy_loss + (1.0 - cfg.lambda) * mle;
    Ok(StepOutput {
        parts: LossParts {
            total: finite(total, "RL loss")?,
            mle_nll: mle,
            recon_nll: None,
            advantage: Some(sc.advantage),
            fell_back: false,
        },
        ag_grads: grads,
        rdec_grads: None,
        qg_grads: Some(qg_grads),
        sample: Some(TokenSequence(sc.sampled)),
    })
}
