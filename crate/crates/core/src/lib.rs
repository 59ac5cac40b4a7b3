//! Desk-scale toolkit for comparing standard causal pretraining with
//! occlusion-based pretraining of a small GPT-style decoder.
//!
//! The pipeline runs end to end in-process: train a byte-level BPE
//! [`tokenizer`], clean and partition text with [`corpus`], build and train a
//! decoder with [`model`] and [`train`], then score it with [`eval`]
//! (perplexity, corpus BLEU, generation). [`sweep`] runs seeded random
//! hyperparameter searches, and [`cli`] binds everything into the `occlm`
//! binary. Runnable walkthroughs live in the crate's `examples/` directory.

pub mod tensor;
mod error;

pub use error::{Error, Result};

pub mod corpus;
pub mod eval;
pub mod model;
pub mod tokenizer;
pub mod train;
pub mod sweep;
pub mod cli;
