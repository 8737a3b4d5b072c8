use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Initial weights are drawn from `U(-INIT_RANGE, INIT_RANGE)`.
pub const INIT_RANGE: f64 = 0.08;

/// Transformer dimensions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            ffn_dim: 256,
            max_positions: 512,
        }
    }

    /// A very small configuration for tests and toy runs.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 16,
            n_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn_dim: 32,
            max_positions: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Init {
    Uniform,
    Ones,
    Zeros,
}

pub(crate) struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

fn spec(out: &mut Vec<ParamSpec>, name: String, rows: usize, cols: usize, init: Init) {
    out.push(ParamSpec {
        name,
        rows,
        cols,
        init,
    });
}

fn layer_norm_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    spec(out, format!("{prefix}.g"), 1, d, Init::Ones);
    spec(out, format!("{prefix}.b"), 1, d, Init::Zeros);
}

fn attention_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    for w in ["wq", "wk", "wv", "wo"] {
        spec(out, format!("{prefix}.{w}"), d, d, Init::Uniform);
    }
}

fn ffn_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize, f: usize) {
    spec(out, format!("{prefix}.w1"), d, f, Init::Uniform);
    spec(out, format!("{prefix}.b1"), 1, f, Init::Zeros);
    spec(out, format!("{prefix}.w2"), f, d, Init::Uniform);
    spec(out, format!("{prefix}.b2"), 1, d, Init::Zeros);
}

pub(crate) fn encoder_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (d, f) = (cfg.d_model, cfg.ffn_dim);
    let mut out = Vec::new();
    spec(&mut out, "enc.tok_emb".into(), cfg.vocab_size, d, Init::Uniform);
    spec(&mut out, "enc.pos_emb".into(), cfg.max_positions, d, Init::Uniform);
    for i in 0..cfg.enc_layers {
        let p = format!("enc.layers.{i}");
        layer_norm_specs(&mut out, &format!("{p}.ln1"), d);
        attention_specs(&mut out, &format!("{p}.attn"), d);
        layer_norm_specs(&mut out, &format!("{p}.ln2"), d);
        ffn_specs(&mut out, &format!("{p}.ffn"), d, f);
    }
    layer_norm_specs(&mut out, "enc.ln_f", d);
    out
}

pub(crate) fn decoder_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (d, f) = (cfg.d_model, cfg.ffn_dim);
    let mut out = Vec::new();
    spec(&mut out, "dec.tok_emb".into(), cfg.vocab_size, d, Init::Uniform);
    spec(&mut out, "dec.pos_emb".into(), cfg.max_positions, d, Init::Uniform);
    for i in 0..cfg.dec_layers {
        let p = format!("dec.layers.{i}");
        layer_norm_specs(&mut out, &format!("{p}.ln1"), d);
        attention_specs(&mut out, &format!("{p}.self_attn"), d);
        layer_norm_specs(&mut out, &format!("{p}.ln2"), d);
        attention_specs(&mut out, &format!("{p}.cross_attn"), d);
        layer_norm_specs(&mut out, &format!("{p}.ln3"), d);
        ffn_specs(&mut out, &format!("{p}.ffn"), d, f);
    }
    layer_norm_specs(&mut out, "dec.ln_f", d);
    spec(&mut out, "dec.out.w".into(), d, cfg.vocab_size, Init::Uniform);
    spec(&mut out, "dec.out.b".into(), 1, cfg.vocab_size, Init::Zeros);
    out
}

/// Named parameter tensors. Also used to hold gradients and optimizer
/// moments, which share the same names and shapes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: BTreeMap<String, Matrix>,
}

/// Gradients keyed by parameter name.
pub type Gradients = ParamStore;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn initialize(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for s in specs {
            let m = match s.init {
                Init::Ones => Matrix::filled(s.rows, s.cols, 1.0),
                Init::Zeros => Matrix::zeros(s.rows, s.cols),
                Init::Uniform => Matrix::from_vec(
                    s.rows,
                    s.cols,
                    (0..s.rows * s.cols)
                        .map(|_| rng.gen_range(-INIT_RANGE..=INIT_RANGE))
                        .collect(),
                ),
            };
            tensors.insert(s.name.clone(), m);
        }
        Self { tensors }
    }

    /// Zero tensors with the same names and shapes as `self`.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Matrix::zeros(v.rows(), v.cols())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, m: Matrix) {
        self.tensors.insert(name.into(), m);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Matrix::len).sum()
    }

    /// `self += scale * other` over the names both stores share.
    pub fn add_scaled(&mut self, other: &ParamStore, scale: f64) {
        for (name, g) in &other.tensors {
            match self.tensors.get_mut(name) {
                Some(m) => m.add_scaled(g, scale),
                None => {
                    let mut m = g.clone();
                    m.scale(scale);
                    self.tensors.insert(name.clone(), m);
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for m in self.tensors.values_mut() {
            m.scale(s);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.values().fold(0.0, |m, t| m.max(t.max_abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Matrix::all_finite)
    }

    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }

    pub(crate) fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        if specs.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        for s in specs {
            match self.tensors.get(&s.name) {
                Some(m) if m.shape() == (s.rows, s.cols) => {}
                Some(m) => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {} has shape {:?}, expected {:?}",
                        s.name,
                        m.shape(),
                        (s.rows, s.cols)
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing tensor {}", s.name))),
            }
        }
        Ok(())
    }
}
