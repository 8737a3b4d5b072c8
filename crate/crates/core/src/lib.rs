//! Summary-centric question-answer pair generation.
//!
//! A from-scratch encoder-decoder transformer with reverse-mode autodiff,
//! length-bucketed constrained decoding, the model variants that chain an
//! answer generator and a question generator, their training objectives,
//! dataset construction from news articles, and evaluation metrics.

pub mod autodiff;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod jsonl;
pub mod lengthdecode;
pub mod objectives;
pub mod optim;
pub mod pipelines;
pub mod seqcore;
pub mod tensor;

pub use error::{Error, Result};
