//! Learned coordinate selection trained with PPO.
//!
//! The policy is a 2-layer feed-forward scorer over the frozen masked model's
//! hidden state at each candidate position concatenated with a summary of the
//! recently selected positions; a linear value head over the mean-pooled
//! features provides the baseline. Rewards are per-step edit-distance
//! improvements against the reference, rollouts go through a FIFO replay
//! buffer, and updates use the clipped surrogate objective.

use std::collections::VecDeque;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoding::greedy_symbol;
use crate::models::MaskedConditionalModel;
use crate::nn::{adam_update, AdamConfig, Parameter, Tensor2D, PROB_FLOOR};
use crate::selection::{SelectionScope, SelectionState};
use crate::seqcore::Sequence;
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// rewards

/// Levenshtein distance with unit insert/delete/substitute costs. Mask
/// tokens are ordinary symbols: they match only other masks.
pub fn edit_distance(a: &Sequence, b: &Sequence) -> usize {
    let (a, b) = (a.ids(), b.ids());
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Change in edit distance to the reference produced by one step:
/// positive when the step moved the sequence closer.
pub fn step_reward(y_before: &Sequence, y_after: &Sequence, y_ref: &Sequence) -> f64 {
    edit_distance(y_before, y_ref) as f64 - edit_distance(y_after, y_ref) as f64
}

// ---------------------------------------------------------------------------
// networks

/// Deterministic sinusoidal embedding of an absolute step index, used inside
/// the history summary. Not learned: the policy only trains its own layers.
pub fn step_embedding(j: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|m| {
            let rate = 1.0 / 10_000f64.powf((2 * (m / 2)) as f64 / d as f64);
            let angle = j as f64 * rate;
            if m % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Mean of `emb(step) + hidden-at-selected-position` over the last k
/// selections; the zero vector with no history (or k = 0).
#[derive(Debug, Clone)]
pub struct HistorySummary {
    k: usize,
    d: usize,
    items: VecDeque<Vec<f64>>,
}

impl HistorySummary {
    pub fn new(k: usize, d: usize) -> Self {
        Self { k, d, items: VecDeque::new() }
    }

    pub fn push(&mut self, step: usize, hidden: &[f64]) {
        if self.k == 0 {
            return;
        }
        let emb = step_embedding(step, self.d);
        let item: Vec<f64> = emb.iter().zip(hidden).map(|(e, h)| e + h).collect();
        self.items.push_back(item);
        while self.items.len() > self.k {
            self.items.pop_front();
        }
    }

    pub fn summary(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        if self.items.is_empty() {
            return out;
        }
        for item in &self.items {
            for (o, v) in out.iter_mut().zip(item) {
                *o += v;
            }
        }
        let n = self.items.len() as f64;
        for o in &mut out {
            *o /= n;
        }
        out
    }
}

/// 2-layer relu scorer f_θ over z = [h_i ; h̄]. The output layer starts at
/// zero so the untrained policy is exactly uniform.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyNet {
    pub d_model: usize,
    pub hidden: usize,
    w1: Parameter,
    b1: Parameter,
    w2: Parameter,
    b2: Parameter,
}

impl PolicyNet {
    pub fn new<R: Rng + ?Sized>(d_model: usize, hidden: usize, mut rng: &mut R) -> Self {
        let d_in = 2 * d_model;
        Self {
            d_model,
            hidden,
            w1: Parameter::new("policy.w1", Tensor2D::randn(d_in, hidden, 0.05, &mut rng)),
            b1: Parameter::new("policy.b1", Tensor2D::zeros(1, hidden)),
            w2: Parameter::new("policy.w2", Tensor2D::zeros(hidden, 1)),
            b2: Parameter::new("policy.b2", Tensor2D::zeros(1, 1)),
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn zero_grads(&mut self) {
        self.params_mut().iter_mut().for_each(|p| p.zero_grad());
    }

    /// Score plus the relu activations needed for backward.
    fn forward(&self, z: &[f64]) -> (f64, Vec<f64>) {
        assert_eq!(z.len(), 2 * self.d_model);
        let h: Vec<f64> = (0..self.hidden)
            .map(|c| {
                let mut pre = self.b1.value.get(0, c);
                for (r, &zv) in z.iter().enumerate() {
                    pre += zv * self.w1.value.get(r, c);
                }
                pre.max(0.0)
            })
            .collect();
        let mut score = self.b2.value.get(0, 0);
        for (c, &hv) in h.iter().enumerate() {
            score += hv * self.w2.value.get(c, 0);
        }
        (score, h)
    }

    pub fn score(&self, z: &[f64]) -> f64 {
        self.forward(z).0
    }

    /// Accumulates gradients of `dscore · score(z)` into the parameters.
    fn backward(&mut self, z: &[f64], relu_out: &[f64], dscore: f64) {
        let mut db2 = self.b2.grad.get(0, 0);
        db2 += dscore;
        self.b2.grad.set(0, 0, db2);
        for (c, &hv) in relu_out.iter().enumerate() {
            let g = self.w2.grad.get(c, 0) + dscore * hv;
            self.w2.grad.set(c, 0, g);
            if hv > 0.0 {
                let dh = dscore * self.w2.value.get(c, 0);
                let gb = self.b1.grad.get(0, c) + dh;
                self.b1.grad.set(0, c, gb);
                for (r, &zv) in z.iter().enumerate() {
                    let gw = self.w1.grad.get(r, c) + dh * zv;
                    self.w1.grad.set(r, c, gw);
                }
            }
        }
    }
}

/// Linear value head V_θ over the mean-pooled [mean_i h_i ; h̄] feature.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValueNet {
    pub d_model: usize,
    w: Parameter,
    b: Parameter,
}

impl ValueNet {
    pub fn new<R: Rng + ?Sized>(d_model: usize, mut rng: &mut R) -> Self {
        Self {
            d_model,
            w: Parameter::new("value.w", Tensor2D::randn(2 * d_model, 1, 0.05, &mut rng)),
            b: Parameter::new("value.b", Tensor2D::zeros(1, 1)),
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.w, &mut self.b]
    }

    pub fn zero_grads(&mut self) {
        self.params_mut().iter_mut().for_each(|p| p.zero_grad());
    }

    pub fn forward(&self, feat: &[f64]) -> f64 {
        assert_eq!(feat.len(), 2 * self.d_model);
        let mut v = self.b.value.get(0, 0);
        for (r, &f) in feat.iter().enumerate() {
            v += f * self.w.value.get(r, 0);
        }
        v
    }

    fn backward(&mut self, feat: &[f64], dout: f64) {
        self.b.grad.set(0, 0, self.b.grad.get(0, 0) + dout);
        for (r, &f) in feat.iter().enumerate() {
            self.w.grad.set(r, 0, self.w.grad.get(r, 0) + dout * f);
        }
    }
}

/// Softmax over the policy's scores for the given per-position features.
pub fn policy_distribution(policy: &PolicyNet, feats: &[Vec<f64>]) -> Result<Vec<f64>> {
    if feats.is_empty() {
        return Err(Error::Selection("empty eligible set".into()));
    }
    let scores: Vec<f64> = feats.iter().map(|z| policy.score(z)).collect();
    crate::nn::softmax(&scores, 1.0)
}

// ---------------------------------------------------------------------------
// episodes and the replay buffer

#[derive(Debug, Clone)]
pub struct Transition {
    /// [h_i ; h̄] per eligible position, aligned with `eligible`.
    pub pos_feats: Vec<Vec<f64>>,
    pub eligible: Vec<usize>,
    /// Index into `eligible`.
    pub action: usize,
    pub old_logp: f64,
    pub reward: f64,
    pub value_feat: Vec<f64>,
    pub value_est: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Episode {
    pub transitions: Vec<Transition>,
}

impl Episode {
    pub fn total_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }
}

/// Discounted Monte Carlo returns and advantages against the stored value
/// baseline: G_t = Σ γ^{t'−t} r_{t'}, A_t = G_t − V(s_t).
pub fn compute_advantages(episode: &Episode, gamma: f64) -> Vec<(f64, f64)> {
    let mut out = vec![(0.0, 0.0); episode.transitions.len()];
    let mut running = 0.0;
    for (k, t) in episode.transitions.iter().enumerate().rev() {
        running = t.reward + gamma * running;
        out[k] = (running, running - t.value_est);
    }
    out
}

#[derive(Debug, Clone)]
pub struct BufferItem {
    pub seq_no: u64,
    pub trans: Transition,
    pub ret: f64,
    pub adv: f64,
}

/// Replay storage in timesteps; oldest transitions leave first.
#[derive(Debug, Default)]
pub struct FifoBuffer {
    capacity: usize,
    next_seq: u64,
    items: VecDeque<BufferItem>,
}

impl FifoBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, next_seq: 0, items: VecDeque::new() }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, trans: Transition, ret: f64, adv: f64) {
        self.items.push_back(BufferItem { seq_no: self.next_seq, trans, ret, adv });
        self.next_seq += 1;
        while self.items.len() > self.capacity {
            self.items.pop_front();
        }
    }

    pub fn oldest_seq_no(&self) -> Option<u64> {
        self.items.front().map(|i| i.seq_no)
    }

    pub fn sample<'a, R: Rng + ?Sized>(&'a self, n: usize, rng: &mut R) -> Vec<&'a BufferItem> {
        (0..n).map(|_| &self.items[rng.gen_range(0..self.items.len())]).collect()
    }
}

// ---------------------------------------------------------------------------
// PPO

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub clip_epsilon: f64,
    pub gamma: f64,
    /// History size k for h̄ (0 disables the summary).
    pub history_k: usize,
    pub hidden: usize,
    /// Sequences rolled out per iteration.
    pub generation_batch: usize,
    /// Buffer capacity in timesteps.
    pub buffer_capacity: usize,
    /// Timesteps per gradient update.
    pub update_batch: usize,
    /// Update batches per iteration.
    pub epochs: usize,
    pub value_loss_weight: f64,
    pub lr: f64,
    pub iterations: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            gamma: 0.9,
            history_k: 0,
            hidden: 128,
            generation_batch: 4,
            buffer_capacity: 2000,
            update_batch: 64,
            epochs: 2,
            value_loss_weight: 0.5,
            lr: 1e-3,
            iterations: 300,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(Error::Config("clip_epsilon must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config("gamma must lie in [0, 1]".into()));
        }
        if self.generation_batch == 0 || self.buffer_capacity == 0 || self.update_batch == 0 {
            return Err(Error::Config("ppo batch sizes must be >= 1".into()));
        }
        Ok(())
    }
}

/// One length-L linear-time episode against a reference: positions sampled
/// from the policy over unfilled slots, symbols greedy from the frozen
/// masked model, rewards by edit-distance delta.
pub fn rollout<M, R>(
    policy: &PolicyNet,
    value: &ValueNet,
    model: &M,
    x: &Sequence,
    y_ref: &Sequence,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<Episode>
where
    M: MaskedConditionalModel + ?Sized,
    R: Rng + ?Sized,
{
    let vocab = model.vocab();
    let content = vocab.content_ids();
    let l = y_ref.len();
    if l == 0 {
        return Err(Error::InvalidLength("reference must be nonempty".into()));
    }
    let mut y = Sequence::from_ids(vec![vocab.mask_id(); l]);
    let mut filled = vec![false; l];
    let mut history = HistorySummary::new(cfg.history_k, policy.d_model);
    let mut episode = Episode::default();
    for t in 1..=l {
        let hidden = model
            .hidden_states(&y, x)
            .ok_or_else(|| Error::Model("policy training needs model hidden states".into()))?;
        let hbar = history.summary();
        let eligible: Vec<usize> = (0..l).filter(|&i| !filled[i]).collect();
        let pos_feats: Vec<Vec<f64>> = eligible
            .iter()
            .map(|&i| hidden[i].iter().chain(&hbar).copied().collect())
            .collect();
        let dist = policy_distribution(policy, &pos_feats)?;
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut action = dist.len() - 1;
        for (k, &p) in dist.iter().enumerate() {
            acc += p;
            if u < acc {
                action = k;
                break;
            }
        }
        let old_logp = dist[action].max(PROB_FLOOR).ln();
        let mut mean_h = vec![0.0; policy.d_model];
        for h in &hidden {
            for (m, &v) in mean_h.iter_mut().zip(h) {
                *m += v;
            }
        }
        for m in &mut mean_h {
            *m /= l as f64;
        }
        let value_feat: Vec<f64> = mean_h.iter().chain(&hbar).copied().collect();
        let value_est = value.forward(&value_feat);

        let pos = eligible[action];
        let row = model.conditional(&y, &[pos], x)?.remove(0);
        let (tok, _) = greedy_symbol(&row, &content);
        let mut ids = y.ids().to_vec();
        ids[pos] = tok;
        let y_next = Sequence::from_ids(ids);
        let reward = step_reward(&y, &y_next, y_ref);
        history.push(t, &hidden[pos]);
        filled[pos] = true;
        episode.transitions.push(Transition {
            pos_feats,
            eligible,
            action,
            old_logp,
            reward,
            value_feat,
            value_est,
        });
        y = y_next;
    }
    Ok(episode)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoStats {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
}

/// Clipped-surrogate loss over a sampled batch, with gradients accumulated
/// into both networks (caller zeroes and applies).
pub fn ppo_loss(
    batch: &[&BufferItem],
    policy: &mut PolicyNet,
    value: &mut ValueNet,
    cfg: &PpoConfig,
) -> Result<PpoStats> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Config("ppo batch must be nonempty".into()));
    }
    let n = batch.len() as f64;
    let eps = cfg.clip_epsilon;
    let mut policy_loss = 0.0;
    let mut value_loss = 0.0;
    let mut clipped = 0usize;
    for item in batch {
        let t = &item.trans;
        let forwards: Vec<(f64, Vec<f64>)> = t.pos_feats.iter().map(|z| policy.forward(z)).collect();
        let scores: Vec<f64> = forwards.iter().map(|f| f.0).collect();
        let probs = crate::nn::softmax(&scores, 1.0)?;
        let new_logp = probs[t.action].max(PROB_FLOOR).ln();
        let rho = (new_logp - t.old_logp).exp();
        let unclipped = rho * item.adv;
        let obj = unclipped.min(rho.clamp(1.0 - eps, 1.0 + eps) * item.adv);
        policy_loss -= obj / n;
        let clip_active =
            (item.adv > 0.0 && rho > 1.0 + eps) || (item.adv < 0.0 && rho < 1.0 - eps);
        if clip_active {
            clipped += 1;
        } else {
            // d(-obj)/d(new_logp) = -ρ·A on the unclipped branch
            let dlogp = -rho * item.adv / n;
            for (k, ((z, (_, relu_out)), &p)) in
                t.pos_feats.iter().zip(&forwards).zip(&probs).enumerate()
            {
                let indicator = if k == t.action { 1.0 } else { 0.0 };
                policy.backward(z, relu_out, dlogp * (indicator - p));
            }
        }

        let v = value.forward(&t.value_feat);
        let err = v - item.ret;
        value_loss += err * err / n;
        value.backward(&t.value_feat, cfg.value_loss_weight * 2.0 * err / n);
    }
    Ok(PpoStats {
        loss: policy_loss + cfg.value_loss_weight * value_loss,
        policy_loss,
        value_loss,
        clip_fraction: clipped as f64 / n,
    })
}

// ---------------------------------------------------------------------------
// training

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub iteration: usize,
    pub mean_reward: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
}

pub fn write_train_log<W: Write>(rows: &[TrainLogRow], w: &mut W) -> Result<()> {
    writeln!(w, "iteration,mean_reward,policy_loss,value_loss,clip_fraction")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.iteration, r.mean_reward, r.policy_loss, r.value_loss, r.clip_fraction
        )?;
    }
    Ok(())
}

#[derive(Debug)]
pub struct PolicyTrainReport {
    pub policy: PolicyNet,
    pub value: ValueNet,
    pub reward_curve: Vec<f64>,
    pub log: Vec<TrainLogRow>,
}

/// Alternates rollout batches into the FIFO buffer with PPO update batches
/// sampled from it, over a frozen masked model.
pub fn train_policy<M, R>(
    model: &M,
    pairs: &[(Sequence, Sequence)],
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<PolicyTrainReport>
where
    M: MaskedConditionalModel + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Corpus("cannot train a policy on an empty corpus".into()));
    }
    // probe the hidden-state dimension once
    let (x0, y0) = &pairs[0];
    let probe = Sequence::from_ids(vec![model.vocab().mask_id(); y0.len()]);
    let d_model = model
        .hidden_states(&probe, x0)
        .ok_or_else(|| Error::Model("policy training needs model hidden states".into()))?[0]
        .len();
    let mut policy = PolicyNet::new(d_model, cfg.hidden, rng);
    let mut value = ValueNet::new(d_model, rng);
    let mut buffer = FifoBuffer::new(cfg.buffer_capacity);
    let adam = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut reward_curve = Vec::with_capacity(cfg.iterations);
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut adam_step = 0usize;
    for iteration in 1..=cfg.iterations {
        let mut reward_sum = 0.0;
        for _ in 0..cfg.generation_batch {
            let (x, y_ref) = &pairs[rng.gen_range(0..pairs.len())];
            let episode = rollout(&policy, &value, model, x, y_ref, cfg, rng)?;
            reward_sum += episode.total_reward();
            for (trans, (ret, adv)) in episode
                .transitions
                .iter()
                .zip(compute_advantages(&episode, cfg.gamma))
            {
                buffer.push(trans.clone(), ret, adv);
            }
        }
        let mean_reward = reward_sum / cfg.generation_batch as f64;
        let mut last = PpoStats { loss: 0.0, policy_loss: 0.0, value_loss: 0.0, clip_fraction: 0.0 };
        for _ in 0..cfg.epochs {
            let batch = buffer.sample(cfg.update_batch.min(buffer.len()), rng);
            policy.zero_grads();
            value.zero_grads();
            last = ppo_loss(&batch, &mut policy, &mut value, cfg)?;
            adam_step += 1;
            for p in policy.params_mut().into_iter().chain(value.params_mut()) {
                adam_update(p, &adam, adam_step);
            }
        }
        reward_curve.push(mean_reward);
        log.push(TrainLogRow {
            iteration,
            mean_reward,
            policy_loss: last.policy_loss,
            value_loss: last.value_loss,
            clip_fraction: last.clip_fraction,
        });
    }
    Ok(PolicyTrainReport { policy, value, reward_curve, log })
}

// ---------------------------------------------------------------------------
// decode-time wrapper

/// A trained policy packaged for use as a decoding strategy.
///
/// History at decode time is rebuilt from the selection state's recorded
/// order using the *current* hidden states at previously selected positions
/// (the at-selection-time states are not retained); with the default k = 0
/// this is exact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionPolicy {
    pub net: PolicyNet,
    pub history_k: usize,
}

impl SelectionPolicy {
    fn features<M>(
        &self,
        model: &M,
        state: &SelectionState,
        x: &Sequence,
        eligible: &[usize],
    ) -> Result<Vec<Vec<f64>>>
    where
        M: MaskedConditionalModel + ?Sized,
    {
        let hidden = model
            .hidden_states(&state.y, x)
            .ok_or_else(|| Error::Model("policy strategy needs model hidden states".into()))?;
        let mut history = HistorySummary::new(self.history_k, self.net.d_model);
        let start = state.history.len().saturating_sub(self.history_k);
        for &(step, pos) in &state.history[start..] {
            history.push(step, &hidden[pos]);
        }
        let hbar = history.summary();
        Ok(eligible
            .iter()
            .map(|&i| hidden[i].iter().chain(&hbar).copied().collect())
            .collect())
    }

    pub fn select<M, R>(
        &self,
        model: &M,
        state: &mut SelectionState,
        x: &Sequence,
        o_t: usize,
        scope: SelectionScope,
        rng: &mut R,
    ) -> Result<(Vec<usize>, f64)>
    where
        M: MaskedConditionalModel + ?Sized,
        R: Rng + ?Sized,
    {
        let mut remaining = state.eligible(scope);
        if remaining.len() < o_t {
            return Err(Error::Selection(format!(
                "need {o_t} positions but only {} are eligible",
                remaining.len()
            )));
        }
        let mut feats = self.features(model, state, x, &remaining)?;
        let mut chosen = Vec::with_capacity(o_t);
        let mut log_prob = 0.0;
        for _ in 0..o_t {
            let dist = policy_distribution(&self.net, &feats)?;
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = dist.len() - 1;
            for (k, &p) in dist.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = k;
                    break;
                }
            }
            log_prob += dist[pick].max(PROB_FLOOR).ln();
            chosen.push(remaining.remove(pick));
            feats.remove(pick);
        }
        Ok((chosen, log_prob))
    }

    pub fn rank<M>(
        &self,
        model: &M,
        state: &mut SelectionState,
        x: &Sequence,
        scope: SelectionScope,
    ) -> Result<Vec<(usize, f64)>>
    where
        M: MaskedConditionalModel + ?Sized,
    {
        let eligible = state.eligible(scope);
        if eligible.is_empty() {
            return Err(Error::Selection("empty eligible set".into()));
        }
        let feats = self.features(model, state, x, &eligible)?;
        let dist = policy_distribution(&self.net, &feats)?;
        let mut ranked: Vec<(usize, f64)> = eligible
            .into_iter()
            .zip(dist)
            .map(|(i, p)| (i, p.max(PROB_FLOOR).ln()))
            .collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        Ok(ranked)
    }
}
