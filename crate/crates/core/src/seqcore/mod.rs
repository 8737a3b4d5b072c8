//! Vocabulary, encoder-decoder transformer, standalone decoder and
//! checkpoints.

mod checkpoint;
pub(crate) mod graph;
mod model;
mod params;
mod vocab;

pub use checkpoint::write_atomic;
pub(crate) use model::{argmax, collect_grads, sample_categorical, shift_right};
pub use model::{
    nll_loss, Conditioned, DecoderStates, EncoderStates, Seq2SeqModel, StandaloneDecoder,
};
pub use params::{Gradients, ModelConfig, ParamStore, INIT_RANGE};
pub use vocab::{TokenId, TokenSequence, Vocabulary, BOS, PAD, SEP, UNK};
