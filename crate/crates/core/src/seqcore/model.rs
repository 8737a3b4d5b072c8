use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Grads, NodeId, Reduction, Tape};
use crate::error::{Error, Result};
use crate::lengthdecode::NextTokenModel;
use crate::seqcore::graph::{self, Binder, DecoderNodes, EncoderNodes};
use crate::seqcore::params::{decoder_specs, encoder_specs, Gradients, ModelConfig, ParamStore};
use crate::seqcore::vocab::{TokenId, TokenSequence, Vocabulary};
use crate::tensor::{log_softmax, softmax, Matrix};

/// Encoder output for one source sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStates {
    pub states: Matrix,
    pub valid: Vec<bool>,
}

/// Tokens emitted by a decoder together with the hidden state at each
/// emitting position (`emitted.len() × d_model`).
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderStates {
    pub emitted: TokenSequence,
    pub states: Matrix,
}

impl DecoderStates {
    /// Emitted tokens without a trailing end-of-sequence token.
    pub fn content(&self, eos: TokenId) -> &[TokenId] {
        match self.emitted.split_last() {
            Some((&last, rest)) if last == eos => rest,
            _ => &self.emitted,
        }
    }
}

/// Gradient of the loss with respect to every leaf in `leaves`; leaves that
/// received nothing (constants, unused parameters) get zeros.
pub(crate) fn collect_grads(
    tape: &Tape,
    leaves: &[(String, NodeId)],
    grads: &mut Grads,
) -> Gradients {
    let mut out = Gradients::new();
    for (name, id) in leaves {
        let g = grads.take(*id).unwrap_or_else(|| {
            let v = tape.value(*id);
            Matrix::zeros(v.rows(), v.cols())
        });
        out.insert(name.clone(), g);
    }
    out
}

pub(crate) struct BoundSeq2Seq {
    pub enc: EncoderNodes,
    pub dec: DecoderNodes,
    pub leaves: Vec<(String, NodeId)>,
}

/// `[<s>] + target[..n-1]`: decoder input for teacher forcing.
pub(crate) fn shift_right(bos: TokenId, target: &[TokenId]) -> Vec<TokenId> {
    let mut input = Vec::with_capacity(target.len());
    input.push(bos);
    input.extend_from_slice(&target[..target.len().saturating_sub(1)]);
    input
}

/// Encoder-decoder transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct Seq2SeqModel {
    config: ModelConfig,
    vocab: Vocabulary,
    params: ParamStore,
}

impl Seq2SeqModel {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        Self::check_config(&config, &vocab)?;
        let mut specs = encoder_specs(&config);
        specs.extend(decoder_specs(&config));
        let params = ParamStore::initialize(&specs, seed);
        Ok(Self {
            config,
            vocab,
            params,
        })
    }

    pub fn from_parts(config: ModelConfig, vocab: Vocabulary, params: ParamStore) -> Result<Self> {
        Self::check_config(&config, &vocab)?;
        let mut specs = encoder_specs(&config);
        specs.extend(decoder_specs(&config));
        params.check_against(&specs)?;
        Ok(Self {
            config,
            vocab,
            params,
        })
    }

    fn check_config(config: &ModelConfig, vocab: &Vocabulary) -> Result<()> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "vocab_size {} does not match vocabulary of {} tokens",
                config.vocab_size,
                vocab.len()
            )));
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub(crate) fn check_seq(&self, seq: &[TokenId], what: &str) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::input(format!("{what} sequence is empty")));
        }
        if seq.len() > self.config.max_positions {
            return Err(Error::input(format!(
                "{what} length {} exceeds max_positions {}",
                seq.len(),
                self.config.max_positions
            )));
        }
        self.vocab.check(seq)
    }

    pub(crate) fn bind<'a>(&'a self, t: &mut Tape<'a>, trainable: bool) -> BoundSeq2Seq {
        let mut leaves = Vec::new();
        let mut b = Binder::new(t, &self.params, trainable, &mut leaves);
        let enc = b.encoder(&self.config);
        let dec = b.decoder(&self.config);
        BoundSeq2Seq { enc, dec, leaves }
    }

    pub(crate) fn src_valid(&self, src: &[TokenId]) -> Vec<bool> {
        src.iter().map(|&id| id != self.vocab.pad_id()).collect()
    }

    /// Teacher-forced forward pass on a tape. Returns `(states, logits)`
    /// nodes, one row per target token.
    pub(crate) fn forward_graph(
        &self,
        t: &mut Tape,
        b: &BoundSeq2Seq,
        src: &[TokenId],
        target: &[TokenId],
    ) -> Result<(NodeId, NodeId)> {
        self.check_seq(src, "source")?;
        self.check_seq(target, "target")?;
        let valid = self.src_valid(src);
        let memory = graph::encode(t, &b.enc, &self.config, src, &valid);
        let input = shift_right(self.vocab.bos_id(), target);
        let states = graph::decode_states(t, &b.dec, &self.config, memory, &valid, &input);
        let logits = graph::project(t, &b.dec, states);
        Ok((states, logits))
    }

    pub fn encode(&self, src: &TokenSequence) -> Result<EncoderStates> {
        self.check_seq(src, "source")?;
        let mut t = Tape::new();
        let mut leaves = Vec::new();
        let enc = Binder::new(&mut t, &self.params, false, &mut leaves).encoder(&self.config);
        let valid = self.src_valid(src);
        let out = graph::encode(&mut t, &enc, &self.config, src, &valid);
        Ok(EncoderStates {
            states: t.value(out).clone(),
            valid,
        })
    }

    fn check_memory(&self, enc: &EncoderStates) -> Result<()> {
        if enc.states.cols() != self.config.d_model || enc.states.rows() != enc.valid.len() {
            return Err(Error::input("encoder states do not match this model"));
        }
        Ok(())
    }

    /// Decoder states for an explicit decoder input, no logits.
    fn decoder_states(&self, enc: &EncoderStates, input: &[TokenId]) -> Result<Matrix> {
        self.check_memory(enc)?;
        self.check_seq(input, "decoder input")?;
        let mut t = Tape::new();
        let mut leaves = Vec::new();
        let dec = Binder::new(&mut t, &self.params, false, &mut leaves).decoder(&self.config);
        let memory = t.constant(&enc.states);
        let states = graph::decode_states(&mut t, &dec, &self.config, memory, &enc.valid, input);
        Ok(t.value(states).clone())
    }

    fn project_row(&self, state: &[f64]) -> Vec<f64> {
        let w = self.params.get("dec.out.w").expect("output projection");
        let b = self.params.get("dec.out.b").expect("output bias");
        let mut out = b.row(0).to_vec();
        for (k, &s) in state.iter().enumerate() {
            if s == 0.0 {
                continue;
            }
            for (o, &wv) in out.iter_mut().zip(w.row(k)) {
                *o += s * wv;
            }
        }
        out
    }

    /// Logits for every target position (`len(target) × vocab`), plus the
    /// decoder states that produced them.
    pub fn decode_teacher_forced(
        &self,
        enc: &EncoderStates,
        target: &TokenSequence,
    ) -> Result<(Matrix, DecoderStates)> {
        self.check_memory(enc)?;
        self.check_seq(target, "target")?;
        let mut t = Tape::new();
        let mut leaves = Vec::new();
        let dec = Binder::new(&mut t, &self.params, false, &mut leaves).decoder(&self.config);
        let memory = t.constant(&enc.states);
        let input = shift_right(self.vocab.bos_id(), target);
        let states = graph::decode_states(&mut t, &dec, &self.config, memory, &enc.valid, &input);
        let logits = graph::project(&mut t, &dec, states);
        Ok((
            t.value(logits).clone(),
            DecoderStates {
                emitted: target.clone(),
                states: t.value(states).clone(),
            },
        ))
    }

    /// Next-token logits after `<s>` followed by `prefix`.
    pub fn next_token_logits(&self, enc: &EncoderStates, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut input = Vec::with_capacity(prefix.len() + 1);
        input.push(self.vocab.bos_id());
        input.extend_from_slice(prefix);
        let states = self.decoder_states(enc, &input)?;
        Ok(self.project_row(states.row(states.rows() - 1)))
    }

    fn check_steps(&self, max_steps: usize) -> Result<()> {
        if max_steps == 0 || max_steps > self.config.max_positions {
            return Err(Error::input(format!(
                "max_steps must be in 1..={}, got {max_steps}",
                self.config.max_positions
            )));
        }
        Ok(())
    }

    fn decode_with(
        &self,
        enc: &EncoderStates,
        max_steps: usize,
        mut pick: impl FnMut(&[f64]) -> TokenId,
    ) -> Result<DecoderStates> {
        self.check_steps(max_steps)?;
        let eos = self.vocab.eos_id();
        let mut input = vec![self.vocab.bos_id()];
        let mut emitted = Vec::new();
        loop {
            let states = self.decoder_states(enc, &input)?;
            let logits = self.project_row(states.row(states.rows() - 1));
            let tok = pick(&logits);
            emitted.push(tok);
            if tok == eos || emitted.len() == max_steps {
                return Ok(DecoderStates {
                    emitted: TokenSequence(emitted),
                    states,
                });
            }
            input.push(tok);
        }
    }

    /// Ancestral sampling at temperature 1 from the full softmax. Stops at
    /// `</s>` or after `max_steps` tokens.
    pub fn decode_sample<R: Rng + ?Sized>(
        &self,
        enc: &EncoderStates,
        max_steps: usize,
        rng: &mut R,
    ) -> Result<DecoderStates> {
        self.decode_with(enc, max_steps, |logits| sample_categorical(&softmax(logits), rng))
    }

    pub fn decode_sample_seeded(
        &self,
        enc: &EncoderStates,
        max_steps: usize,
        seed: u64,
    ) -> Result<DecoderStates> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.decode_sample(enc, max_steps, &mut rng)
    }

    /// Unconstrained greedy decoding (argmax, lowest id on ties).
    pub fn decode_greedy(&self, enc: &EncoderStates, max_steps: usize) -> Result<DecoderStates> {
        self.decode_with(enc, max_steps, argmax)
    }

    /// Mean token negative log-likelihood of `target` given `src`.
    pub fn loss(&self, src: &TokenSequence, target: &TokenSequence) -> Result<f64> {
        let mut t = Tape::new();
        let b = self.bind(&mut t, false);
        let (_, logits) = self.forward_graph(&mut t, &b, src, target)?;
        let targets: Vec<Option<usize>> = target.iter().map(|&id| Some(id)).collect();
        let loss = t.nll(logits, &targets, Reduction::Mean);
        Ok(t.scalar(loss))
    }

    /// Mean token NLL and its gradient with respect to every parameter.
    pub fn loss_and_grads(
        &self,
        src: &TokenSequence,
        target: &TokenSequence,
    ) -> Result<(f64, Gradients)> {
        let mut t = Tape::new();
        let b = self.bind(&mut t, true);
        let (_, logits) = self.forward_graph(&mut t, &b, src, target)?;
        let targets: Vec<Option<usize>> = target.iter().map(|&id| Some(id)).collect();
        let loss = t.nll(logits, &targets, Reduction::Mean);
        let mut grads = t.backward(loss);
        let g = collect_grads(&t, &b.leaves, &mut grads);
        Ok((t.scalar(loss), g))
    }

    /// Binds the encoder output as the conditioning context for
    /// step-by-step decoding.
    pub fn conditioned(&self, src: &TokenSequence) -> Result<Conditioned<'_>> {
        let enc = self.encode(src)?;
        Ok(Conditioned { model: self, enc })
    }
}

/// A model with a fixed source, usable by the length-controlled decoder.
pub struct Conditioned<'m> {
    model: &'m Seq2SeqModel,
    enc: EncoderStates,
}

impl Conditioned<'_> {
    pub fn encoder_states(&self) -> &EncoderStates {
        &self.enc
    }
}

impl NextTokenModel for Conditioned<'_> {
    fn vocab_size(&self) -> usize {
        self.model.vocab.len()
    }

    fn eos_id(&self) -> TokenId {
        self.model.vocab.eos_id()
    }

    fn banned_ids(&self) -> Vec<TokenId> {
        self.model.vocab.non_content_ids()
    }

    fn next_logits(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        self.model.next_token_logits(&self.enc, prefix)
    }
}

/// Decoder that cross-attends to another decoder's hidden states; used to
/// rebuild the question from a generated summary's representation.
#[derive(Clone, Debug, PartialEq)]
pub struct StandaloneDecoder {
    config: ModelConfig,
    vocab: Vocabulary,
    params: ParamStore,
}

impl StandaloneDecoder {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        Seq2SeqModel::check_config(&config, &vocab)?;
        let params = ParamStore::initialize(&decoder_specs(&config), seed);
        Ok(Self {
            config,
            vocab,
            params,
        })
    }

    pub fn from_parts(config: ModelConfig, vocab: Vocabulary, params: ParamStore) -> Result<Self> {
        Seq2SeqModel::check_config(&config, &vocab)?;
        params.check_against(&decoder_specs(&config))?;
        Ok(Self {
            config,
            vocab,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub(crate) fn bind<'a>(
        &'a self,
        t: &mut Tape<'a>,
        trainable: bool,
    ) -> (DecoderNodes, Vec<(String, NodeId)>) {
        let mut leaves = Vec::new();
        let dec = Binder::new(t, &self.params, trainable, &mut leaves).decoder(&self.config);
        (dec, leaves)
    }

    pub(crate) fn check_target(&self, memory_rows: usize, target: &[TokenId]) -> Result<()> {
        if memory_rows == 0 {
            return Err(Error::input("reconstruction memory is empty"));
        }
        if target.is_empty() || target.len() > self.config.max_positions {
            return Err(Error::input("reconstruction target length out of range"));
        }
        self.vocab.check(target)
    }

    /// Logits for `target` (teacher-forced) given memory rows.
    pub(crate) fn logits_graph(
        &self,
        t: &mut Tape,
        dec: &DecoderNodes,
        memory: NodeId,
        memory_rows: usize,
        target: &[TokenId],
    ) -> NodeId {
        let valid = vec![true; memory_rows];
        let input = shift_right(self.vocab.bos_id(), target);
        let states = graph::decode_states(t, dec, &self.config, memory, &valid, &input);
        graph::project(t, dec, states)
    }

    pub fn decode_with_memory(&self, memory: &Matrix, target: &TokenSequence) -> Result<Matrix> {
        if memory.cols() != self.config.d_model {
            return Err(Error::input(format!(
                "memory width {} does not match d_model {}",
                memory.cols(),
                self.config.d_model
            )));
        }
        self.check_target(memory.rows(), target)?;
        let mut t = Tape::new();
        let (dec, _) = self.bind(&mut t, false);
        let m = t.constant(memory);
        let logits = self.logits_graph(&mut t, &dec, m, memory.rows(), target);
        Ok(t.value(logits).clone())
    }

    /// Mean NLL of `target` given `memory`, with gradients for the memory
    /// rows and for every parameter.
    pub fn loss_and_grads(&self, memory: &Matrix, target: &TokenSequence) -> Result<(f64, Matrix, Gradients)> {
        if memory.cols() != self.config.d_model {
            return Err(Error::input("memory width does not match d_model"));
        }
        self.check_target(memory.rows(), target)?;
        let mut t = Tape::new();
        let (dec, leaves) = self.bind(&mut t, true);
        let m = t.param(memory);
        let logits = self.logits_graph(&mut t, &dec, m, memory.rows(), target);
        let targets: Vec<Option<usize>> = target.iter().map(|&id| Some(id)).collect();
        let loss = t.nll(logits, &targets, Reduction::Mean);
        let mut grads = t.backward(loss);
        let gm = grads
            .take(m)
            .unwrap_or_else(|| Matrix::zeros(memory.rows(), memory.cols()));
        let g = collect_grads(&t, &leaves, &mut grads);
        Ok((t.scalar(loss), gm, g))
    }
}

/// Mean negative log-likelihood of `target` under row-wise softmax of
/// `logits`, skipping pad positions.
pub fn nll_loss(logits: &Matrix, target: &[TokenId], pad: TokenId) -> Result<f64> {
    if logits.rows() != target.len() {
        return Err(Error::input(format!(
            "{} logit rows for {} targets",
            logits.rows(),
            target.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, &tok) in target.iter().enumerate() {
        if tok == pad {
            continue;
        }
        if tok >= logits.cols() {
            return Err(Error::input(format!("target id {tok} out of range")));
        }
        total -= log_softmax(logits.row(r))[tok];
        count += 1;
    }
    if count == 0 {
        return Err(Error::input("target has no non-pad tokens"));
    }
    Ok(total / count as f64)
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from a probability vector.
pub(crate) fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}
