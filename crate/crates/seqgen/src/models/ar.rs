//! Autoregressive rescorer: the same encoder substrate with causal
//! visibility over `[source, <sep>, target, <eos>]`. All chain-rule factors
//! come out of one forward pass since the left-to-right constraint is
//! enforced by the attention mask.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Corpus;
use crate::nn::{adam_update, cross_entropy, softmax_in_place, AdamConfig, Tensor2D, Transformer, TransformerConfig, PROB_FLOOR};
use crate::seqcore::{Sequence, Vocabulary};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArModel {
    pub net: Transformer,
    vocab: Vocabulary,
    max_src_len: usize,
    max_tgt_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArTrainConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_blocks: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
}

impl Default for ArTrainConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            d_ff: 128,
            n_blocks: 2,
            steps: 3000,
            batch_size: 8,
            lr: 1e-3,
            max_src_len: 24,
            max_tgt_len: 24,
        }
    }
}

impl ArModel {
    pub fn new(vocab: Vocabulary, cfg: &ArTrainConfig, rng: &mut impl Rng) -> Self {
        let tcfg = TransformerConfig {
            vocab_size: vocab.size(),
            d_model: cfg.d_model,
            d_ff: cfg.d_ff,
            n_blocks: cfg.n_blocks,
            // room for the trailing <eos> position during training
            max_len: cfg.max_src_len + 1 + cfg.max_tgt_len + 1,
            causal: true,
        };
        Self { net: Transformer::new(tcfg, rng), vocab, max_src_len: cfg.max_src_len, max_tgt_len: cfg.max_tgt_len }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn encode(&self, y: &Sequence, x: &Sequence) -> Result<(Vec<usize>, usize)> {
        if x.len() > self.max_src_len {
            return Err(Error::Model(format!("source length {} over max {}", x.len(), self.max_src_len)));
        }
        if y.len() > self.max_tgt_len {
            return Err(Error::Model(format!("target length {} over max {}", y.len(), self.max_tgt_len)));
        }
        if y.contains_mask(&self.vocab) {
            return Err(Error::Model("ar_log_prob requires a mask-free sequence".into()));
        }
        let sep = self.vocab.sep_id().ok_or_else(|| Error::Model("vocab has no <sep>".into()))?;
        let mut tokens = Vec::with_capacity(x.len() + 1 + y.len());
        tokens.extend_from_slice(x.ids());
        tokens.push(sep);
        let offset = tokens.len();
        tokens.extend_from_slice(y.ids());
        Ok((tokens, offset))
    }

    /// `sum_i log p(y_i | y_<i, X)` plus the end-of-sequence factor.
    pub fn log_prob(&self, y: &Sequence, x: &Sequence) -> Result<f64> {
        let eos = self.vocab.eos_id().ok_or_else(|| Error::Model("vocab has no <eos>".into()))?;
        let (tokens, offset) = self.encode(y, x)?;
        // The position after the last target token predicts <eos>; feed it a
        // pad so the logits row exists (causal masking keeps it out of every
        // other row's context).
        let mut padded = tokens;
        padded.push(self.vocab.pad_id());
        let (logits, _) = self.net.forward(&padded);
        let mut total = 0.0;
        for i in 0..y.len() {
            let mut row = logits.row(offset - 1 + i).to_vec();
            softmax_in_place(&mut row);
            total += row[y.get(i)].max(PROB_FLOOR).ln();
        }
        let mut row = logits.row(offset - 1 + y.len()).to_vec();
        softmax_in_place(&mut row);
        total += row[eos].max(PROB_FLOOR).ln();
        Ok(total)
    }
}

/// Trains the causal rescorer with next-token cross-entropy over targets.
pub fn train_ar<R: Rng>(corpus: &Corpus, cfg: &ArTrainConfig, rng: &mut R) -> Result<ArModel> {
    if corpus.is_empty() {
        return Err(Error::Corpus("cannot train on an empty corpus".into()));
    }
    let vocab = Vocabulary::with_specials(&corpus.token_inventory())?;
    let eos = vocab.eos_id().expect("with_specials provides <eos>");
    let mut model = ArModel::new(vocab.clone(), cfg, rng);
    let pairs: Vec<(Sequence, Sequence)> = (0..corpus.len())
        .map(|i| corpus.pair_ids(i, &vocab))
        .collect::<Result<_>>()?;
    let adam = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    for step in 1..=cfg.steps {
        model.net.zero_grads();
        let mut n_pred = 0usize;
        for _ in 0..cfg.batch_size {
            let (x, y) = &pairs[rng.gen_range(0..pairs.len())];
            let (mut tokens, offset) = model.encode(y, x)?;
            tokens.push(vocab.pad_id());
            let (logits, cache) = model.net.forward(&tokens);
            let mut dlogits = Tensor2D::zeros(logits.rows, logits.cols);
            let mut targets: Vec<usize> = y.ids().to_vec();
            targets.push(eos);
            for (i, &tgt) in targets.iter().enumerate() {
                let pos = offset - 1 + i;
                let mut row = logits.row(pos).to_vec();
                softmax_in_place(&mut row);
                let (_, g) = cross_entropy(&row, tgt)?;
                let dst = dlogits.row_mut(pos);
                for (d, s) in dst.iter_mut().zip(&g) {
                    *d += s;
                }
                n_pred += 1;
            }
            model.net.backward(&cache, &dlogits);
        }
        let scale = 1.0 / n_pred.max(1) as f64;
        for p in model.net.params_mut() {
            p.grad.scale(scale);
            adam_update(p, &adam, step);
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::CorpusPair;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_model() -> (ArModel, Vocabulary) {
        let corpus = Corpus {
            pairs: vec![CorpusPair {
                source: vec!["a".into(), "b".into()],
                target: vec!["x".into(), "y".into(), "z".into()],
            }],
        };
        let cfg = ArTrainConfig {
            d_model: 16,
            d_ff: 24,
            n_blocks: 1,
            steps: 30,
            batch_size: 2,
            lr: 2e-3,
            max_src_len: 4,
            max_tgt_len: 5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = train_ar(&corpus, &cfg, &mut rng).unwrap();
        let v = m.vocab().clone();
        (m, v)
    }

    #[test]
    fn log_prob_nonpositive_and_single_factor() {
        let (m, v) = toy_model();
        let x = Sequence::from_ids(vec![v.id_of("a").unwrap()]);
        let y1 = Sequence::from_ids(vec![v.id_of("x").unwrap()]);
        let lp = m.log_prob(&y1, &x).unwrap();
        assert!(lp <= 0.0);

        let y3 = Sequence::from_ids(vec![
            v.id_of("x").unwrap(),
            v.id_of("y").unwrap(),
            v.id_of("z").unwrap(),
        ]);
        assert!(m.log_prob(&y3, &x).unwrap() <= 0.0);
    }

    #[test]
    fn parallel_equals_sequential_evaluation() {
        let (m, v) = toy_model();
        let x = Sequence::from_ids(vec![v.id_of("a").unwrap(), v.id_of("b").unwrap()]);
        let y = Sequence::from_ids(vec![
            v.id_of("y").unwrap(),
            v.id_of("x").unwrap(),
            v.id_of("z").unwrap(),
        ]);
        let parallel = m.log_prob(&y, &x).unwrap();

        // sequential oracle: re-run the model on each growing prefix
        let sep = v.sep_id().unwrap();
        let eos = v.eos_id().unwrap();
        let mut sequential = 0.0;
        for i in 0..=y.len() {
            let mut tokens: Vec<usize> = x.ids().to_vec();
            tokens.push(sep);
            tokens.extend_from_slice(&y.ids()[..i]);
            let (logits, _) = m.net.forward(&tokens);
            let mut row = logits.row(tokens.len() - 1).to_vec();
            softmax_in_place(&mut row);
            let tgt = if i < y.len() { y.get(i) } else { eos };
            sequential += row[tgt].max(PROB_FLOOR).ln();
        }
        assert!((parallel - sequential).abs() < 1e-9, "{parallel} vs {sequential}");
    }

    #[test]
    fn rejects_masked_and_overlong_input() {
        let (m, v) = toy_model();
        let x = Sequence::from_ids(vec![v.id_of("a").unwrap()]);
        let masked = Sequence::from_ids(vec![v.mask_id()]);
        assert!(m.log_prob(&masked, &x).is_err());
        let long = Sequence::from_ids(vec![v.id_of("x").unwrap(); 9]);
        assert!(m.log_prob(&long, &x).is_err());
    }
}
