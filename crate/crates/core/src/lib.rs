//! Entity-consistent task-oriented dialog generation.
//!
//! The pipeline embeds a knowledge base into the training dialogs through
//! template relexicalization, generates the entity of each turn
//! autoregressively under a prefix-trie constraint, and conditions the
//! response on that entity. Training is end to end: for dialogs without
//! entity labels the response loss reaches the entity decoder through
//! LogitConcat, the product of the entity token distributions with a
//! gradient-stopped copy of the shared embedding matrix.
//!
//! Modules, bottom up:
//!
//! - [`kb`]: knowledge base, user goals, tokenizer, vocabulary
//! - [`trie`]: entity prefix tree and constrained renormalization
//! - [`augment`]: dialog corpus, DELEX / RELEX augmentation
//! - [`tape`]: reverse-mode autodiff over small dense matrices
//! - [`model`]: shared encoder, entity and response decoders, losses
//! - [`corpus`]: per-domain KBs and tries, dialog turns as model inputs
//! - [`train`]: optimizer and training loop
//! - [`generate`]: constrained entity decoding and response decoding
//! - [`eval`]: BLEU, Inform, Success, Score, F1 and Consistency
//! - [`synth`]: synthetic restaurant corpus
//! - [`pipeline`]: end-to-end experiments and ablations

pub mod augment;
pub mod corpus;
pub mod distribution;
pub mod error;
pub mod eval;
pub mod generate;
pub mod kb;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod tape;
pub mod train;
pub mod trie;

pub use error::{EcoError, Result};

/// Schema version written into every file this crate produces.
pub const FORMAT_VERSION: u32 = 1;
