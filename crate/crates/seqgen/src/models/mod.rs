//! Masked-conditional models: the interface every decoder consumes, plus the
//! exact tabular oracle, the trainable toy masked LM, the autoregressive
//! rescorer, and the empirical length model.

mod ar;
mod checkpoint;
mod corpus;
mod length;
mod masked_lm;
mod tabular;

pub use ar::{train_ar, ArModel, ArTrainConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointKind};
pub use corpus::{Corpus, CorpusPair};
pub use length::{length_candidates, LengthCandidate, LengthDistribution};
pub use masked_lm::{train_masked_lm, LmTrainConfig, ToyMaskedLM, TrainReport};
pub use tabular::{tabular_exact_map, TabularJointModel};

use crate::nn::PROB_FLOOR;
use crate::seqcore::{Sequence, Vocabulary};
use crate::{Error, Result};

/// A provider of per-position conditionals `p(y_i | Y with masks, X)` plus the
/// length distribution `p(L|X)`.
pub trait MaskedConditionalModel {
    fn vocab(&self) -> &Vocabulary;

    fn max_length(&self) -> usize;

    /// Whether conditionals are exact joint-table marginals (oracle models).
    fn supports_exact(&self) -> bool {
        false
    }

    /// One probability row per entry of `masked`, in the same order. Every
    /// queried position is masked before prediction, so the returned rows are
    /// independent of the pre-mask symbols there. When several positions are
    /// masked in one query the rows come from a single forward pass and are
    /// conditionally independent given the masked context.
    fn conditional(&self, y: &Sequence, masked: &[usize], x: &Sequence) -> Result<Vec<Vec<f64>>>;

    fn length_log_prob(&self, x: &Sequence, len: usize) -> f64;

    /// Final-layer hidden state per target position, if the model exposes one
    /// (used by the learned selection policy). Oracle models return `None`.
    fn hidden_states(&self, _y: &Sequence, _x: &Sequence) -> Option<Vec<Vec<f64>>> {
        None
    }
}

/// `sum_i log p(y_i | Y with mask at i, X)` over a mask-free sequence.
pub fn pseudo_log_likelihood<M: MaskedConditionalModel + ?Sized>(
    model: &M,
    y: &Sequence,
    x: &Sequence,
) -> Result<f64> {
    if y.contains_mask(model.vocab()) {
        return Err(Error::Model("pseudo_log_likelihood requires a mask-free sequence".into()));
    }
    let mut total = 0.0;
    for i in 0..y.len() {
        let rows = model.conditional(y, &[i], x)?;
        total += rows[0][y.get(i)].max(PROB_FLOOR).ln();
    }
    Ok(total)
}

/// One conditional row per position, each computed with only that position
/// masked (the per-step feature sweep).
pub fn full_sweep<M: MaskedConditionalModel + ?Sized>(
    model: &M,
    y: &Sequence,
    x: &Sequence,
) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(y.len());
    for i in 0..y.len() {
        rows.push(model.conditional(y, &[i], x)?.remove(0));
    }
    Ok(rows)
}
