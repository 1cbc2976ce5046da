//! Single-head transformer encoder used by both the masked LM (bidirectional)
//! and the autoregressive rescorer (causal). Forward saves the activations
//! needed for the hand-written backward pass.
//!
//! Layout per block (no layer norm, no dropout; residuals only):
//!   q = x Wq, k = x Wk, v = x Wv
//!   a = softmax(q k^T / sqrt(d))          (+ causal mask when configured)
//!   x <- x + (a v) Wo
//!   x <- x + relu(x W1 + b1) W2 + b2
//! followed by an output head `logits = x Wout + bout`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{softmax_in_place, Parameter, Tensor2D};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_blocks: usize,
    pub max_len: usize,
    pub causal: bool,
}

impl TransformerConfig {
    pub fn toy(vocab_size: usize, max_len: usize, causal: bool) -> Self {
        Self { vocab_size, d_model: 64, d_ff: 128, n_blocks: 2, max_len, causal }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Block {
    wq: Parameter,
    wk: Parameter,
    wv: Parameter,
    wo: Parameter,
    w1: Parameter,
    b1: Parameter,
    w2: Parameter,
    b2: Parameter,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Transformer {
    pub config: TransformerConfig,
    tok_emb: Parameter,
    pos_emb: Parameter,
    blocks: Vec<Block>,
    out_w: Parameter,
    out_b: Parameter,
}

/// Per-block activations saved by the forward pass.
struct BlockCache {
    x_in: Tensor2D,
    q: Tensor2D,
    k: Tensor2D,
    v: Tensor2D,
    attn: Tensor2D,
    head: Tensor2D,
    x_mid: Tensor2D,
    pre_act: Tensor2D,
    act: Tensor2D,
}

pub struct TransformerCache {
    tokens: Vec<usize>,
    blocks: Vec<BlockCache>,
    hidden: Tensor2D,
}

impl TransformerCache {
    /// Final-layer hidden states, one row per input position.
    pub fn hidden(&self) -> &Tensor2D {
        &self.hidden
    }
}

impl Transformer {
    pub fn new<R: Rng>(config: TransformerConfig, rng: &mut R) -> Self {
        let d = config.d_model;
        let std = 0.05;
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for b in 0..config.n_blocks {
            blocks.push(Block {
                wq: Parameter::new(format!("block{b}.wq"), Tensor2D::randn(d, d, std, rng)),
                wk: Parameter::new(format!("block{b}.wk"), Tensor2D::randn(d, d, std, rng)),
                wv: Parameter::new(format!("block{b}.wv"), Tensor2D::randn(d, d, std, rng)),
                wo: Parameter::new(format!("block{b}.wo"), Tensor2D::randn(d, d, std, rng)),
                w1: Parameter::new(format!("block{b}.w1"), Tensor2D::randn(d, config.d_ff, std, rng)),
                b1: Parameter::new(format!("block{b}.b1"), Tensor2D::zeros(1, config.d_ff)),
                w2: Parameter::new(format!("block{b}.w2"), Tensor2D::randn(config.d_ff, d, std, rng)),
                b2: Parameter::new(format!("block{b}.b2"), Tensor2D::zeros(1, d)),
            });
        }
        Self {
            tok_emb: Parameter::new("tok_emb", Tensor2D::randn(config.vocab_size, d, std, rng)),
            pos_emb: Parameter::new("pos_emb", Tensor2D::randn(config.max_len, d, std, rng)),
            blocks,
            out_w: Parameter::new("out_w", Tensor2D::randn(d, config.vocab_size, std, rng)),
            out_b: Parameter::new("out_b", Tensor2D::zeros(1, config.vocab_size)),
            config,
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            out.extend([&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.b1, &b.w2, &b.b2]);
        }
        out.extend([&self.out_w, &self.out_b]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.push(&mut b.wq);
            out.push(&mut b.wk);
            out.push(&mut b.wv);
            out.push(&mut b.wo);
            out.push(&mut b.w1);
            out.push(&mut b.b1);
            out.push(&mut b.w2);
            out.push(&mut b.b2);
        }
        out.push(&mut self.out_w);
        out.push(&mut self.out_b);
        out
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Runs the encoder, returning logits (one row per position) and the cache.
    pub fn forward(&self, tokens: &[usize]) -> (Tensor2D, TransformerCache) {
        let n = tokens.len();
        assert!(n <= self.config.max_len, "sequence length {n} over max {}", self.config.max_len);
        let d = self.config.d_model;
        let mut x = Tensor2D::zeros(n, d);
        for (i, &t) in tokens.iter().enumerate() {
            let te = self.tok_emb.value.row(t);
            let pe = self.pos_emb.value.row(i);
            let row = x.row_mut(i);
            for c in 0..d {
                row[c] = te[c] + pe[c];
            }
        }

        let scale = 1.0 / (d as f64).sqrt();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let x_in = x.clone();
            let q = x.matmul(&block.wq.value);
            let k = x.matmul(&block.wk.value);
            let v = x.matmul(&block.wv.value);
            let mut attn = q.matmul_nt(&k);
            attn.scale(scale);
            for i in 0..n {
                let limit = if self.config.causal { i + 1 } else { n };
                let row = attn.row_mut(i);
                for val in row[limit..].iter_mut() {
                    *val = f64::NEG_INFINITY;
                }
                softmax_in_place(&mut row[..limit]);
                for val in row[limit..].iter_mut() {
                    *val = 0.0;
                }
            }
            let head = attn.matmul(&v);
            let proj = head.matmul(&block.wo.value);
            x.add_assign(&proj);
            let x_mid = x.clone();

            let mut pre_act = x_mid.matmul(&block.w1.value);
            pre_act.add_row_broadcast(&block.b1.value);
            let mut act = pre_act.clone();
            act.data.iter_mut().for_each(|v| *v = v.max(0.0));
            let mut ff = act.matmul(&block.w2.value);
            ff.add_row_broadcast(&block.b2.value);
            x.add_assign(&ff);

            caches.push(BlockCache { x_in, q, k, v, attn, head, x_mid, pre_act, act });
        }

        let mut logits = x.matmul(&self.out_w.value);
        logits.add_row_broadcast(&self.out_b.value);
        let cache = TransformerCache { tokens: tokens.to_vec(), blocks: caches, hidden: x };
        (logits, cache)
    }

    /// Accumulates parameter gradients given the loss gradient w.r.t. the logits.
    pub fn backward(&mut self, cache: &TransformerCache, dlogits: &Tensor2D) {
        let d = self.config.d_model;
        let scale = 1.0 / (d as f64).sqrt();
        let n = cache.tokens.len();

        self.out_w.grad.add_assign(&cache.hidden.matmul_tn(dlogits));
        self.out_b.grad.add_assign(&dlogits.col_sums());
        let mut dx = dlogits.matmul_nt(&self.out_w.value);

        for (block, bc) in self.blocks.iter_mut().zip(cache.blocks.iter()).rev() {
            // feed-forward sublayer: x_out = x_mid + relu(x_mid W1 + b1) W2 + b2
            let dff = &dx; // gradient of the ff branch output
            block.w2.grad.add_assign(&bc.act.matmul_tn(dff));
            block.b2.grad.add_assign(&dff.col_sums());
            let mut dact = dff.matmul_nt(&block.w2.value);
            for (g, &u) in dact.data.iter_mut().zip(&bc.pre_act.data) {
                if u <= 0.0 {
                    *g = 0.0;
                }
            }
            block.w1.grad.add_assign(&bc.x_mid.matmul_tn(&dact));
            block.b1.grad.add_assign(&dact.col_sums());
            let mut dx_mid = dx; // residual path
            dx_mid.add_assign(&dact.matmul_nt(&block.w1.value));

            // attention sublayer: x_mid = x_in + (attn v) Wo
            let dproj = &dx_mid;
            block.wo.grad.add_assign(&bc.head.matmul_tn(dproj));
            let dhead = dproj.matmul_nt(&block.wo.value);
            let mut dattn = dhead.matmul_nt(&bc.v);
            let dv = bc.attn.matmul_tn(&dhead);
            // softmax rows backward
            let mut dscores = Tensor2D::zeros(n, n);
            for i in 0..n {
                let a = bc.attn.row(i);
                let da = dattn.row_mut(i);
                let dot: f64 = a.iter().zip(da.iter()).map(|(x, y)| x * y).sum();
                let out = dscores.row_mut(i);
                for j in 0..n {
                    out[j] = a[j] * (da[j] - dot);
                }
            }
            dscores.scale(scale);
            let dq = dscores.matmul(&bc.k);
            let dk = dscores.matmul_tn(&bc.q);

            block.wq.grad.add_assign(&bc.x_in.matmul_tn(&dq));
            block.wk.grad.add_assign(&bc.x_in.matmul_tn(&dk));
            block.wv.grad.add_assign(&bc.x_in.matmul_tn(&dv));

            let mut dx_in = dx_mid; // residual
            dx_in.add_assign(&dq.matmul_nt(&block.wq.value));
            dx_in.add_assign(&dk.matmul_nt(&block.wk.value));
            dx_in.add_assign(&dv.matmul_nt(&block.wv.value));
            dx = dx_in;
        }

        for (i, &t) in cache.tokens.iter().enumerate() {
            let src = dx.row(i);
            let te = self.tok_emb.grad.row_mut(t);
            for c in 0..d {
                te[c] += src[c];
            }
            let pe = self.pos_emb.grad.row_mut(i);
            for c in 0..d {
                pe[c] += src[c];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{cross_entropy, gradient_check, softmax, ParamFn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct TransformerLoss {
        model: Transformer,
        tokens: Vec<usize>,
        targets: Vec<(usize, usize)>, // (position, target token)
    }

    impl TransformerLoss {
        fn run(&self, grad: bool) -> (f64, Option<(Tensor2D, TransformerCache)>) {
            let (logits, cache) = self.model.forward(&self.tokens);
            let mut loss = 0.0;
            let mut dlogits = Tensor2D::zeros(logits.rows, logits.cols);
            for &(pos, tgt) in &self.targets {
                let probs = softmax(logits.row(pos), 1.0).unwrap();
                let (l, g) = cross_entropy(&probs, tgt).unwrap();
                loss += l;
                let row = dlogits.row_mut(pos);
                for (dst, src) in row.iter_mut().zip(&g) {
                    *dst += src;
                }
            }
            if grad {
                (loss, Some((dlogits, cache)))
            } else {
                (loss, None)
            }
        }
    }

    impl ParamFn for TransformerLoss {
        fn params(&self) -> Vec<&Parameter> {
            self.model.params()
        }
        fn params_mut(&mut self) -> Vec<&mut Parameter> {
            self.model.params_mut()
        }
        fn loss_and_grad(&mut self) -> f64 {
            let (loss, extras) = self.run(true);
            let (dlogits, cache) = extras.unwrap();
            self.model.backward(&cache, &dlogits);
            loss
        }
        fn loss(&mut self) -> f64 {
            self.run(false).0
        }
    }

    fn small_config(causal: bool) -> TransformerConfig {
        TransformerConfig { vocab_size: 7, d_model: 8, d_ff: 12, n_blocks: 2, max_len: 6, causal }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Transformer::new(small_config(false), &mut rng);
        let (a, _) = model.forward(&[1, 2, 3]);
        let (b, _) = model.forward(&[1, 2, 3]);
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn bidirectional_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = Transformer::new(small_config(false), &mut rng);
        let mut f = TransformerLoss {
            model,
            tokens: vec![1, 4, 2, 5],
            targets: vec![(1, 3), (3, 0)],
        };
        let err = gradient_check(&mut f, 150, &mut rng);
        assert!(err < 1e-3, "max rel err {err}");
    }

    #[test]
    fn causal_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Transformer::new(small_config(true), &mut rng);
        let mut f = TransformerLoss {
            model,
            tokens: vec![2, 1, 6, 0, 3],
            targets: vec![(0, 1), (2, 4), (4, 5)],
        };
        let err = gradient_check(&mut f, 150, &mut rng);
        assert!(err < 1e-3, "max rel err {err}");
    }

    #[test]
    fn causal_logits_ignore_future_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = Transformer::new(small_config(true), &mut rng);
        let (a, _) = model.forward(&[1, 2, 3, 4]);
        let (b, _) = model.forward(&[1, 2, 3, 6]);
        for pos in 0..3 {
            assert_eq!(a.row(pos), b.row(pos), "position {pos} saw a future token");
        }
    }
}
