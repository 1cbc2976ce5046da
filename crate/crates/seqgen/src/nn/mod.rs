//! Minimal differentiable substrate: tensors, softmax/cross-entropy, scaled
//! dot-product attention, Adam, and finite-difference gradient verification.
//!
//! Only the fixed architectures shipped in this crate are supported; there is
//! no general autograd graph. Each architecture implements its own backward
//! pass and is checked against central finite differences.

mod tensor;
mod transformer;

pub use tensor::Tensor2D;
pub use transformer::{Transformer, TransformerCache, TransformerConfig};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Probability floor used when taking logs of model outputs.
pub const PROB_FLOOR: f64 = 1e-12;

/// A trainable tensor with its gradient accumulator and Adam moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor2D,
    pub grad: Tensor2D,
    pub adam_m: Tensor2D,
    pub adam_v: Tensor2D,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor2D) -> Self {
        let (r, c) = (value.rows, value.cols);
        Self {
            name: name.into(),
            value,
            grad: Tensor2D::zeros(r, c),
            adam_m: Tensor2D::zeros(r, c),
            adam_v: Tensor2D::zeros(r, c),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        // beta2 = 0.98 matches the training setup for the sequence models.
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.98, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.eps <= 0.0 {
            return Err(Error::Config("adam: lr and eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam: betas must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Bias-corrected Adam update, element-wise. The caller zeroes the gradient.
pub fn adam_update(p: &mut Parameter, cfg: &AdamConfig, step: usize) {
    assert!(step >= 1, "adam step counter starts at 1");
    let b1t = 1.0 - cfg.beta1.powi(step as i32);
    let b2t = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..p.value.data.len() {
        let g = p.grad.data[i];
        p.adam_m.data[i] = cfg.beta1 * p.adam_m.data[i] + (1.0 - cfg.beta1) * g;
        p.adam_v.data[i] = cfg.beta2 * p.adam_v.data[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = p.adam_m.data[i] / b1t;
        let v_hat = p.adam_v.data[i] / b2t;
        p.value.data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Numerically stable softmax with temperature.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Numeric(format!("softmax temperature {temperature} must be finite and > 0")));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("softmax input must be finite".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| ((v - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// In-place stable softmax over a logit slice at temperature 1 (inference hot path).
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Cross-entropy loss with the gradient w.r.t. the logits that produced `probs`.
pub fn cross_entropy(probs: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= probs.len() {
        return Err(Error::PositionOutOfRange(target, probs.len()));
    }
    let loss = -probs[target].max(PROB_FLOOR).ln();
    let mut grad = probs.to_vec();
    grad[target] -= 1.0;
    Ok((loss, grad))
}

/// `softmax(Q K^T / sqrt(d)) V`, full bidirectional visibility.
pub fn scaled_dot_attention(q: &Tensor2D, k: &Tensor2D, v: &Tensor2D) -> Result<Tensor2D> {
    attention_impl(q, k, v, false)
}

/// Left-context-only variant: position i attends only to keys j <= i.
pub fn causal_scaled_dot_attention(q: &Tensor2D, k: &Tensor2D, v: &Tensor2D) -> Result<Tensor2D> {
    attention_impl(q, k, v, true)
}

fn attention_impl(q: &Tensor2D, k: &Tensor2D, v: &Tensor2D, causal: bool) -> Result<Tensor2D> {
    if q.cols != k.cols || k.rows != v.rows {
        return Err(Error::Shape(format!(
            "attention shapes q={}x{} k={}x{} v={}x{}",
            q.rows, q.cols, k.rows, k.cols, v.rows, v.cols
        )));
    }
    let scale = 1.0 / (q.cols as f64).sqrt();
    let mut scores = q.matmul_nt(k);
    scores.scale(scale);
    for i in 0..scores.rows {
        if causal {
            for j in (i + 1)..scores.cols {
                scores.set(i, j, f64::NEG_INFINITY);
            }
        }
        let row = scores.row_mut(i);
        let limit = if causal { i + 1 } else { row.len() };
        softmax_in_place(&mut row[..limit]);
        for v in row[limit..].iter_mut() {
            *v = 0.0;
        }
    }
    Ok(scores.matmul(v))
}

/// A scalar loss over a parameter set whose gradients can be computed
/// analytically; the contract [`gradient_check`] verifies.
pub trait ParamFn {
    fn params(&self) -> Vec<&Parameter>;
    fn params_mut(&mut self) -> Vec<&mut Parameter>;
    /// Computes the loss and writes analytic gradients into each `Parameter.grad`.
    fn loss_and_grad(&mut self) -> f64;
    /// Loss only (used for the finite-difference probes).
    fn loss(&mut self) -> f64;
}

/// Compares analytic gradients to central finite differences on a random
/// subsample of coordinates and returns the worst relative error.
///
/// Coordinates whose gradient magnitude is below 1e-2 are compared against
/// that absolute floor instead; at h=1e-4 a relu kink crossing perturbs the
/// central difference by more than such gradients are worth.
pub fn gradient_check<F: ParamFn, R: Rng>(f: &mut F, n_coords: usize, rng: &mut R) -> f64 {
    let h = 1e-4;
    f.params_mut().iter_mut().for_each(|p| p.zero_grad());
    f.loss_and_grad();
    let analytic: Vec<Tensor2D> = f.params().iter().map(|p| p.grad.clone()).collect();

    let sizes: Vec<usize> = f.params().iter().map(|p| p.value.data.len()).collect();
    let total: usize = sizes.iter().sum();
    let n = n_coords.min(total);
    let mut max_rel = 0.0f64;
    for _ in 0..n {
        let flat = rng.gen_range(0..total);
        let (pi, ci) = locate(&sizes, flat);

        let orig = f.params()[pi].value.data[ci];
        f.params_mut()[pi].value.data[ci] = orig + h;
        let lp = f.loss();
        f.params_mut()[pi].value.data[ci] = orig - h;
        let lm = f.loss();
        f.params_mut()[pi].value.data[ci] = orig;

        let numeric = (lp - lm) / (2.0 * h);
        let a = analytic[pi].data[ci];
        let denom = a.abs().max(numeric.abs()).max(1e-2);
        max_rel = max_rel.max((a - numeric).abs() / denom);
    }
    max_rel
}

fn locate(sizes: &[usize], mut flat: usize) -> (usize, usize) {
    for (i, &s) in sizes.iter().enumerate() {
        if flat < s {
            return (i, flat);
        }
        flat -= s;
    }
    unreachable!("flat index out of range")
}
