//! Transformer forward passes built on the tape.

use crate::autodiff::{NodeId, Tape};
use crate::seqcore::params::{ModelConfig, ParamStore};
use crate::seqcore::vocab::TokenId;

struct LnNodes {
    g: NodeId,
    b: NodeId,
}

struct AttnNodes {
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
}

struct FfnNodes {
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

struct EncLayer {
    ln1: LnNodes,
    attn: AttnNodes,
    ln2: LnNodes,
    ffn: FfnNodes,
}

struct DecLayer {
    ln1: LnNodes,
    self_attn: AttnNodes,
    ln2: LnNodes,
    cross_attn: AttnNodes,
    ln3: LnNodes,
    ffn: FfnNodes,
}

pub(crate) struct EncoderNodes {
    tok_emb: NodeId,
    pos_emb: NodeId,
    layers: Vec<EncLayer>,
    ln_f: LnNodes,
}

pub(crate) struct DecoderNodes {
    tok_emb: NodeId,
    pos_emb: NodeId,
    layers: Vec<DecLayer>,
    ln_f: LnNodes,
    out_w: NodeId,
    out_b: NodeId,
}

/// Parameters of one store placed on a tape, with the leaf ids needed to
/// read gradients back by name.
pub(crate) struct Binder<'s, 'a, 't> {
    tape: &'t mut Tape<'a>,
    store: &'a ParamStore,
    trainable: bool,
    pub leaves: &'s mut Vec<(String, NodeId)>,
}

impl<'s, 'a, 't> Binder<'s, 'a, 't> {
    pub fn new(
        tape: &'t mut Tape<'a>,
        store: &'a ParamStore,
        trainable: bool,
        leaves: &'s mut Vec<(String, NodeId)>,
    ) -> Self {
        Self {
            tape,
            store,
            trainable,
            leaves,
        }
    }

    fn leaf(&mut self, name: &str) -> NodeId {
        let m = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from store"));
        let id = if self.trainable {
            self.tape.param(m)
        } else {
            self.tape.constant(m)
        };
        self.leaves.push((name.to_string(), id));
        id
    }

    fn ln(&mut self, p: &str) -> LnNodes {
        LnNodes {
            g: self.leaf(&format!("{p}.g")),
            b: self.leaf(&format!("{p}.b")),
        }
    }

    fn attn(&mut self, p: &str) -> AttnNodes {
        AttnNodes {
            wq: self.leaf(&format!("{p}.wq")),
            wk: self.leaf(&format!("{p}.wk")),
            wv: self.leaf(&format!("{p}.wv")),
            wo: self.leaf(&format!("{p}.wo")),
        }
    }

    fn ffn(&mut self, p: &str) -> FfnNodes {
        FfnNodes {
            w1: self.leaf(&format!("{p}.w1")),
            b1: self.leaf(&format!("{p}.b1")),
            w2: self.leaf(&format!("{p}.w2")),
            b2: self.leaf(&format!("{p}.b2")),
        }
    }

    pub fn encoder(&mut self, cfg: &ModelConfig) -> EncoderNodes {
        let tok_emb = self.leaf("enc.tok_emb");
        let pos_emb = self.leaf("enc.pos_emb");
        let layers = (0..cfg.enc_layers)
            .map(|i| {
                let p = format!("enc.layers.{i}");
                EncLayer {
                    ln1: self.ln(&format!("{p}.ln1")),
                    attn: self.attn(&format!("{p}.attn")),
                    ln2: self.ln(&format!("{p}.ln2")),
                    ffn: self.ffn(&format!("{p}.ffn")),
                }
            })
            .collect();
        let ln_f = self.ln("enc.ln_f");
        EncoderNodes {
            tok_emb,
            pos_emb,
            layers,
            ln_f,
        }
    }

    pub fn decoder(&mut self, cfg: &ModelConfig) -> DecoderNodes {
        let tok_emb = self.leaf("dec.tok_emb");
        let pos_emb = self.leaf("dec.pos_emb");
        let layers = (0..cfg.dec_layers)
            .map(|i| {
                let p = format!("dec.layers.{i}");
                DecLayer {
                    ln1: self.ln(&format!("{p}.ln1")),
                    self_attn: self.attn(&format!("{p}.self_attn")),
                    ln2: self.ln(&format!("{p}.ln2")),
                    cross_attn: self.attn(&format!("{p}.cross_attn")),
                    ln3: self.ln(&format!("{p}.ln3")),
                    ffn: self.ffn(&format!("{p}.ffn")),
                }
            })
            .collect();
        let ln_f = self.ln("dec.ln_f");
        let out_w = self.leaf("dec.out.w");
        let out_b = self.leaf("dec.out.b");
        DecoderNodes {
            tok_emb,
            pos_emb,
            layers,
            ln_f,
            out_w,
            out_b,
        }
    }
}

fn embed(t: &mut Tape, tok_emb: NodeId, pos_emb: NodeId, ids: &[TokenId]) -> NodeId {
    let positions: Vec<usize> = (0..ids.len()).collect();
    let tok = t.gather(tok_emb, ids);
    let pos = t.gather(pos_emb, &positions);
    t.add(tok, pos)
}

/// Multi-head attention of `q_in` over `kv_in`. `allowed` is the
/// `q_rows × kv_rows` mask, row-major.
fn attention(
    t: &mut Tape,
    w: &AttnNodes,
    cfg: &ModelConfig,
    q_in: NodeId,
    kv_in: NodeId,
    allowed: &[bool],
) -> NodeId {
    let q = t.matmul(q_in, w.wq);
    let k = t.matmul(kv_in, w.wk);
    let v = t.matmul(kv_in, w.wv);
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let heads: Vec<NodeId> = (0..cfg.n_heads)
        .map(|h| {
            let qh = t.slice_cols(q, h * hd, hd);
            let kh = t.slice_cols(k, h * hd, hd);
            let vh = t.slice_cols(v, h * hd, hd);
            let scores = t.matmul_t(qh, kh);
            let scores = t.scale(scores, scale);
            let p = t.masked_softmax(scores, allowed);
            t.matmul(p, vh)
        })
        .collect();
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        t.concat_cols(&heads)
    };
    t.matmul(merged, w.wo)
}

fn feed_forward(t: &mut Tape, w: &FfnNodes, x: NodeId) -> NodeId {
    let h = t.matmul(x, w.w1);
    let h = t.add_row(h, w.b1);
    let h = t.gelu(h);
    let h = t.matmul(h, w.w2);
    t.add_row(h, w.b2)
}

/// Key mask: every query row may attend to every valid key.
pub(crate) fn key_mask(q_rows: usize, key_valid: &[bool]) -> Vec<bool> {
    let mut m = Vec::with_capacity(q_rows * key_valid.len());
    for _ in 0..q_rows {
        m.extend_from_slice(key_valid);
    }
    m
}

/// Causal mask combined with key validity.
pub(crate) fn causal_mask(len: usize, key_valid: &[bool]) -> Vec<bool> {
    let mut m = Vec::with_capacity(len * len);
    for i in 0..len {
        for (j, &valid) in key_valid.iter().enumerate() {
            m.push(j <= i && valid);
        }
    }
    m
}

/// Encoder output states, `len(src) × d_model`.
pub(crate) fn encode(
    t: &mut Tape,
    n: &EncoderNodes,
    cfg: &ModelConfig,
    src: &[TokenId],
    valid: &[bool],
) -> NodeId {
    let mut x = embed(t, n.tok_emb, n.pos_emb, src);
    let mask = key_mask(src.len(), valid);
    for layer in &n.layers {
        let h = t.layer_norm(x, layer.ln1.g, layer.ln1.b);
        let a = attention(t, &layer.attn, cfg, h, h, &mask);
        x = t.add(x, a);
        let h = t.layer_norm(x, layer.ln2.g, layer.ln2.b);
        let f = feed_forward(t, &layer.ffn, h);
        x = t.add(x, f);
    }
    t.layer_norm(x, n.ln_f.g, n.ln_f.b)
}

/// Decoder hidden states (final layer norm applied), `len(input) × d_model`.
pub(crate) fn decode_states(
    t: &mut Tape,
    n: &DecoderNodes,
    cfg: &ModelConfig,
    memory: NodeId,
    memory_valid: &[bool],
    input: &[TokenId],
) -> NodeId {
    let mut x = embed(t, n.tok_emb, n.pos_emb, input);
    let self_valid = vec![true; input.len()];
    let self_mask = causal_mask(input.len(), &self_valid);
    let cross_mask = key_mask(input.len(), memory_valid);
    for layer in &n.layers {
        let h = t.layer_norm(x, layer.ln1.g, layer.ln1.b);
        let a = attention(t, &layer.self_attn, cfg, h, h, &self_mask);
        x = t.add(x, a);
        let h = t.layer_norm(x, layer.ln2.g, layer.ln2.b);
        let c = attention(t, &layer.cross_attn, cfg, h, memory, &cross_mask);
        x = t.add(x, c);
        let h = t.layer_norm(x, layer.ln3.g, layer.ln3.b);
        let f = feed_forward(t, &layer.ffn, h);
        x = t.add(x, f);
    }
    t.layer_norm(x, n.ln_f.g, n.ln_f.b)
}

pub(crate) fn project(t: &mut Tape, n: &DecoderNodes, states: NodeId) -> NodeId {
    let logits = t.matmul(states, n.out_w);
    t.add_row(logits, n.out_b)
}
