//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::path::PathBuf;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qapair::corpus::TitleRule;
use qapair::lengthdecode::{
    constrained_generate, BucketTag, DecodeConstraint, DecodeMode, NextTokenModel,
};
use qapair::objectives::SequencePolicy;
use qapair::pipelines::{
    assemble_input, training_example, wiring_for, Bindings, FourTuple, Generator, InferOrder,
    ModelSource, Variant,
};
use qapair::seqcore::{Gradients, ModelConfig, ParamStore, Seq2SeqModel, TokenId, TokenSequence, Vocabulary};
use qapair::tensor::{log_softmax, softmax, Matrix};
use qapair::Result;

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

pub fn seq(ids: &[usize]) -> TokenSequence {
    TokenSequence(ids.to_vec())
}

// ---------------------------------------------------------------- gradients

pub const FD_EPS: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;
/// Relative errors divide by `max(|analytic|, |numeric|, FD_FLOOR)`, so
/// coordinates with near-zero gradient are judged on absolute error.
pub const FD_FLOOR: f64 = 1e-6;

/// 25 content words after the 7 special tokens.
pub fn vocab32() -> Vocabulary {
    Vocabulary::from_words((0..25).map(|i| format!("w{i}"))).unwrap()
}

pub fn tiny_model(seed: u64) -> Seq2SeqModel {
    let v = vocab32();
    Seq2SeqModel::new(ModelConfig::tiny(v.len()), v, seed).unwrap()
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
    /// Coordinates with nonzero analytic gradient, per tensor-name prefix.
    pub nonzero: HashMap<String, usize>,
}

impl FdReport {
    pub fn merge(&mut self, other: FdReport) {
        self.checked += other.checked;
        if other.max_rel > self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst;
        }
        for (k, v) in other.nonzero {
            *self.nonzero.entry(k).or_default() += v;
        }
    }

    pub fn nonzero_with_prefix(&self, prefix: &str) -> usize {
        self.nonzero
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v)
            .sum()
    }

    pub fn ok(&self) -> bool {
        self.checked > 0 && self.max_rel <= FD_TOL
    }
}

/// Central differences over every scalar of every tensor in `analytic`.
pub fn fd_check<T>(
    target: &mut T,
    store: fn(&mut T) -> &mut ParamStore,
    analytic: &Gradients,
    label: &str,
    loss: impl Fn(&T) -> f64,
) -> FdReport {
    let mut report = FdReport::default();
    for (name, grad) in analytic.iter() {
        for i in 0..grad.len() {
            let a = grad.data()[i];
            let orig = store(target).get(name).unwrap().data()[i];
            store(target).get_mut(name).unwrap().data_mut()[i] = orig + FD_EPS;
            let plus = loss(target);
            store(target).get_mut(name).unwrap().data_mut()[i] = orig - FD_EPS;
            let minus = loss(target);
            store(target).get_mut(name).unwrap().data_mut()[i] = orig;
            let n = (plus - minus) / (2.0 * FD_EPS);
            let e = rel_err(a, n);
            report.checked += 1;
            if e > report.max_rel {
                report.max_rel = e;
                report.worst = format!("{label}:{name}[{i}] analytic {a:e} numeric {n:e}");
            }
            if a != 0.0 {
                *report.nonzero.entry(format!("{label}:{name}")).or_default() += 1;
            }
        }
    }
    report
}

/// Central differences over the entries of a plain matrix input.
pub fn fd_check_matrix(m: &Matrix, analytic: &Matrix, loss: impl Fn(&Matrix) -> f64) -> FdReport {
    let mut report = FdReport::default();
    let mut work = m.clone();
    for i in 0..m.len() {
        let orig = work.data()[i];
        work.data_mut()[i] = orig + FD_EPS;
        let plus = loss(&work);
        work.data_mut()[i] = orig - FD_EPS;
        let minus = loss(&work);
        work.data_mut()[i] = orig;
        let a = analytic.data()[i];
        let e = rel_err(a, (plus - minus) / (2.0 * FD_EPS));
        report.checked += 1;
        if e > report.max_rel {
            report.max_rel = e;
            report.worst = format!("memory[{i}]");
        }
    }
    report
}

pub fn model_params(m: &mut Seq2SeqModel) -> &mut ParamStore {
    m.params_mut()
}

// ------------------------------------------------------------ bandit policy

/// Position-tabular policy over `{</s>, a, b}` with at most three steps.
/// `theta` row `t` holds the logits at step `t`.
pub struct TabularPolicy {
    pub theta: Matrix,
}

pub const BANDIT_EOS: TokenId = 0;
pub const BANDIT_STEPS: usize = 3;

impl TabularPolicy {
    pub fn probs(&self, t: usize) -> Vec<f64> {
        softmax(self.theta.row(t))
    }

    /// Every emitted sequence with its probability.
    pub fn enumerate(&self) -> Vec<(Vec<TokenId>, f64)> {
        let mut out = Vec::new();
        let mut stack = vec![(Vec::new(), 1.0)];
        while let Some((prefix, p)) = stack.pop() {
            let t = prefix.len();
            let probs = self.probs(t);
            for (tok, &q) in probs.iter().enumerate() {
                let mut s: Vec<TokenId> = prefix.clone();
                s.push(tok);
                if tok == BANDIT_EOS || s.len() == BANDIT_STEPS {
                    out.push((s, p * q));
                } else {
                    stack.push((s, p * q));
                }
            }
        }
        out
    }

    fn grads(&self) -> Gradients {
        let mut g = Gradients::new();
        g.insert("theta", Matrix::zeros(self.theta.rows(), self.theta.cols()));
        g
    }
}

impl SequencePolicy for TabularPolicy {
    fn sample(&self, rng: &mut dyn RngCore, max_steps: usize) -> Result<Vec<TokenId>> {
        let mut out = Vec::new();
        while out.len() < max_steps {
            let u: f64 = rng.gen();
            let probs = self.probs(out.len());
            let mut acc = 0.0;
            let mut tok = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    tok = i;
                    break;
                }
            }
            out.push(tok);
            if tok == BANDIT_EOS {
                break;
            }
        }
        Ok(out)
    }

    fn greedy(&self, max_steps: usize) -> Result<Vec<TokenId>> {
        let mut out = Vec::new();
        while out.len() < max_steps {
            let row = self.theta.row(out.len());
            let tok = (0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best });
            out.push(tok);
            if tok == BANDIT_EOS {
                break;
            }
        }
        Ok(out)
    }

    fn log_prob_grad(&self, s: &[TokenId]) -> Result<(f64, Gradients)> {
        let mut g = self.grads();
        let gm = g.get_mut("theta").unwrap();
        let mut lp = 0.0;
        for (t, &tok) in s.iter().enumerate() {
            let ls = log_softmax(self.theta.row(t));
            lp += ls[tok];
            for (k, l) in ls.iter().enumerate() {
                let d = if k == tok { 1.0 } else { 0.0 } - l.exp();
                gm.set(t, k, gm.get(t, k) + d);
            }
        }
        Ok((lp, g))
    }
}

/// Reward of a bandit sequence: `a` tokens pay, `b` tokens cost, ending early
/// pays a little.
pub fn bandit_reward(s: &[TokenId]) -> f64 {
    let a = s.iter().filter(|&&t| t == 1).count() as f64;
    let b = s.iter().filter(|&&t| t == 2).count() as f64;
    let early = if s.last() == Some(&BANDIT_EOS) { 0.3 } else { 0.0 };
    a - 0.6 * b + early
}

/// Exact expected self-critic gradient:
/// `-sum_s p(s) (r(s) - r(greedy)) d log p(s)`.
pub fn exact_selfcritic_grad(policy: &TabularPolicy) -> Matrix {
    let g = policy.greedy(BANDIT_STEPS).unwrap();
    let rg = bandit_reward(&g);
    let mut out = Matrix::zeros(policy.theta.rows(), policy.theta.cols());
    for (s, p) in policy.enumerate() {
        let (_, grad) = policy.log_prob_grad(&s).unwrap();
        out.add_scaled(grad.get("theta").unwrap(), -p * (bandit_reward(&s) - rg));
    }
    out
}

pub fn bandit_policy() -> TabularPolicy {
    TabularPolicy {
        theta: Matrix::from_rows(&[
            vec![-0.6, 0.8, 0.9],
            vec![-1.0, 0.6, -0.9],
            vec![0.3, 0.7, -1.0],
        ]),
    }
}

// -------------------------------------------------------------- text oracles

/// LCS by the textbook full-table recurrence.
pub fn lcs_oracle(a: &[String], b: &[String]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in (0..a.len()).rev() {
        for j in (0..b.len()).rev() {
            t[i][j] = if a[i] == b[j] {
                1 + t[i + 1][j + 1]
            } else {
                t[i + 1][j].max(t[i][j + 1])
            };
        }
    }
    t[0][0]
}

pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}

pub fn rouge_oracle(h: &str, r: &str) -> f64 {
    let (h, r) = (words(h), words(r));
    let l = lcs_oracle(&h, &r) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (p, rec) = (l / h.len() as f64, l / r.len() as f64);
    100.0 * 2.0 * p * rec / (p + rec)
}

/// Sentence BLEU-4 by explicit n-gram enumeration: each hypothesis n-gram
/// occurrence is matched against an unused reference occurrence.
pub fn bleu_oracle(h: &str, r: &str) -> f64 {
    let (h, r) = (words(h), words(r));
    let mut log_p = 0.0;
    for n in 1..=4usize {
        let hg: Vec<&[String]> = if h.len() >= n { h.windows(n).collect() } else { vec![] };
        let rg: Vec<&[String]> = if r.len() >= n { r.windows(n).collect() } else { vec![] };
        let mut used = vec![false; rg.len()];
        let mut m = 0usize;
        for g in &hg {
            if let Some(j) = (0..rg.len()).find(|&j| !used[j] && rg[j] == *g) {
                used[j] = true;
                m += 1;
            }
        }
        let p = if n == 1 {
            m as f64 / hg.len() as f64
        } else {
            (m as f64 + 1.0) / (hg.len() as f64 + 1.0)
        };
        if p == 0.0 {
            return 0.0;
        }
        log_p += p.ln();
    }
    let (c, rl) = (h.len() as f64, r.len() as f64);
    let bp = if c > rl { 1.0 } else { (1.0 - rl / c).exp() };
    (100.0 * bp * (log_p / 4.0).exp()).min(100.0)
}

pub fn random_sentence(rng: &mut impl Rng, alphabet: &[&str], max_len: usize) -> String {
    let n = rng.gen_range(1..=max_len);
    (0..n)
        .map(|_| alphabet[rng.gen_range(0..alphabet.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

// ------------------------------------------------------------ title table

/// Hand-decided titles covering the prefix, question-mark, clickbait
/// (blocklist, bare `this`, stock symbol), punctuation and length rules.
pub const TITLE_TABLE: [(&str, Option<TitleRule>); 20] = [
    ("How effective is the Pfizer-BioNTech vaccine?", None),
    ("Is it over?", None),
    ("Why did the council delay the vote this week?", None),
    ("Will this winter be colder than usual?", None),
    ("Breaking news from Washington", Some(TitleRule::QuestionPrefix)),
    ("Vaccines: what do we know?", Some(TitleRule::QuestionPrefix)),
    ("Whatever happened to the mayor?", Some(TitleRule::QuestionPrefix)),
    ("How did the market close today", Some(TitleRule::QuestionMark)),
    ("Is the recession over??", Some(TitleRule::QuestionMark)),
    ("Who won the election? Results inside", Some(TitleRule::QuestionMark)),
    ("Should you refinance your mortgage now?", Some(TitleRule::Blocklist)),
    ("Is Stock picking dead?", Some(TitleRule::Blocklist)),
    ("Are YOU ready for winter storms?", Some(TitleRule::Blocklist)),
    ("Is this the end of cinema?", Some(TitleRule::BareThis)),
    ("Can this plan fix housing?", Some(TitleRule::BareThis)),
    ("Is $TSLA overvalued after the rally?", Some(TitleRule::StockSymbol)),
    ("Can Apple (AAPL) keep growing?", Some(TitleRule::StockSymbol)),
    ("What did the senator say, and why?", Some(TitleRule::Punctuation)),
    ("Why did prices rise; what comes next?", Some(TitleRule::Punctuation)),
    ("Why now?", Some(TitleRule::TitleLength)),
];

// ------------------------------------------------------------ wiring fixture

pub fn wiring_vocab() -> Vocabulary {
    Vocabulary::from_words(["who", "won", "the", "council", "vote", "passed", "what"]).unwrap()
}

pub fn wiring_tuple() -> FourTuple {
    FourTuple {
        question: "who won".into(),
        article: "the council vote passed".into(),
        summary: "council vote passed".into(),
        length_bucket: BucketTag::Lb1,
        score: 0.9,
        model_source: ModelSource::Toy,
        article_id: None,
    }
}

fn ids(s: &TokenSequence) -> String {
    s.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
}

/// Train and inference inputs of `variant` on the fixture, one
/// `name: ids` line each.
pub fn render_wiring(variant: Variant) -> String {
    let v = wiring_vocab();
    let spec = wiring_for(variant);
    let ex = training_example(&spec, &wiring_tuple(), &v, 512, 512).unwrap();
    let b = Bindings {
        d: Some(v.encode("the council vote passed")),
        s_prime: Some(v.encode("vote passed")),
        q_prime: Some(v.encode("what passed")),
        bucket: Some(BucketTag::Lb1),
        ..Default::default()
    };
    let infer_ag = assemble_input(spec.infer_ag_enc.atoms().unwrap(), &b, &v, 512).unwrap();
    let infer_qg = assemble_input(spec.infer_qg_enc.atoms().unwrap(), &b, &v, 512).unwrap();
    let order = match spec.infer_order {
        InferOrder::AnswerFirst => "answer_first",
        InferOrder::QuestionFirst => "question_first",
    };
    format!(
        "train_ag_enc: {}\ntrain_ag_dec: {}\ntrain_qg_enc: {}\ntrain_qg_dec: {}\ninfer_ag_enc: {}\ninfer_qg_enc: {}\norder: {order}\n",
        ids(&ex.ag_src),
        ids(&ex.ag_target),
        ids(&ex.qg_src),
        ids(&ex.qg_target),
        ids(&infer_ag),
        ids(&infer_qg),
    )
}

// --------------------------------------------------------- random decoders

fn hash_prefix(seed: u64, ctx: &[TokenId], prefix: &[TokenId]) -> u64 {
    let mut h = DefaultHasher::new();
    (seed, ctx, prefix).hash(&mut h);
    h.finish()
}

/// Vocabulary whose words sometimes end a sentence.
pub fn sentence_vocab() -> Vocabulary {
    Vocabulary::from_words([
        "the", "city", "said", "on", "monday", "prices", "rose", "again", "ended.", "fell.",
        "now!", "why?", "and", "more", "news",
    ])
    .unwrap()
}

/// Next-token scorer with pseudo-random logits keyed on the prefix.
pub struct RandomLm<'v> {
    pub vocab: &'v Vocabulary,
    pub seed: u64,
    pub ctx: Vec<TokenId>,
    /// Added to the end-of-sequence logit.
    pub eos_bias: f64,
}

impl NextTokenModel for RandomLm<'_> {
    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn eos_id(&self) -> TokenId {
        self.vocab.eos_id()
    }

    fn banned_ids(&self) -> Vec<TokenId> {
        self.vocab.non_content_ids()
    }

    fn next_logits(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(hash_prefix(self.seed, &self.ctx, prefix));
        let mut l: Vec<f64> = (0..self.vocab.len()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        l[self.vocab.eos_id()] += self.eos_bias;
        Ok(l)
    }
}

/// [`Generator`] backed by [`RandomLm`] conditioned on the source ids.
pub struct RandomGenerator {
    pub vocab: Vocabulary,
    pub seed: u64,
    pub eos_bias: f64,
}

impl Generator for RandomGenerator {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn generate(
        &self,
        src: &TokenSequence,
        c: &DecodeConstraint,
        mode: DecodeMode,
        seed: u64,
    ) -> Result<TokenSequence> {
        let lm = RandomLm {
            vocab: &self.vocab,
            seed: self.seed,
            ctx: src.0.clone(),
            eos_bias: self.eos_bias,
        };
        constrained_generate(&lm, c, mode, seed)
    }
}

// --------------------------------------------------------- synthetic corpus

pub const CONTENT_WORDS: [&str; 12] = [
    "red", "blue", "green", "gold", "grey", "pink", "teal", "navy", "rust", "jade", "plum", "sand",
];
pub const FILLER_WORDS: [&str; 6] = ["um", "uh", "er", "hm", "ah", "oh"];

/// Question is the reversed first five summary tokens; the article is the
/// summary followed by filler.
pub fn synthetic_tuple(rng: &mut impl Rng, i: usize) -> FourTuple {
    let s: Vec<&str> = (0..8)
        .map(|_| CONTENT_WORDS[rng.gen_range(0..CONTENT_WORDS.len())])
        .collect();
    let filler: Vec<&str> = (0..4)
        .map(|_| FILLER_WORDS[rng.gen_range(0..FILLER_WORDS.len())])
        .collect();
    let q: Vec<&str> = s[..5].iter().rev().copied().collect();
    FourTuple {
        question: q.join(" "),
        article: format!("{} {}", s.join(" "), filler.join(" ")),
        summary: s.join(" "),
        length_bucket: BucketTag::Lb0,
        score: 1.0,
        model_source: ModelSource::Toy,
        article_id: Some(format!("syn{i}")),
    }
}

pub fn synthetic_corpus(seed: u64, n: usize) -> Vec<FourTuple> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| synthetic_tuple(&mut rng, i)).collect()
}
