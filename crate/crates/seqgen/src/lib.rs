//! Generation from undirected sequence models.
//!
//! The generation process is factored into three parts: length prediction,
//! coordinate selection (which positions to replace at each step), and symbol
//! replacement (what to write at the selected positions). Directed
//! autoregressive, semi-autoregressive, and iterative-refinement
//! non-autoregressive decoders all fall out as special cases of the same loop.
//!
//! The crate ships:
//! - [`seqcore`]: sequence/trace types and trace scoring,
//! - [`nn`]: a minimal dense/attention substrate with manual backprop and Adam,
//! - [`models`]: masked-conditional models (exact tabular oracle, trainable toy
//!   masked LM, autoregressive rescorer) and an empirical length model,
//! - [`selection`]: log-linear coordinate-selection strategies and presets,
//! - [`decoding`]: the generalized loop, special-case decoders, Gibbs sampling,
//!   length-conditioned beam search, brute-force optimistic search,
//! - [`rl`]: PPO-trained coordinate-selection policies with edit-distance rewards,
//! - [`eval`]: BLEU, sequence energy, generation-order analysis,
//! - [`cli`]: config parsing and the batch harness behind the `seqgen` binary.

pub mod cli;
pub mod decoding;
pub mod eval;
pub mod models;
pub mod nn;
pub mod rl;
pub mod selection;
pub mod seqcore;

mod error;

pub use error::{Error, Result};
