//! Coordinate selection: which positions get (re)written at each step.
//!
//! The log-linear family scores every position with three features —
//! negative entropy of its conditional, negative log-probability of its
//! current symbol, and a positional prior peaked at i = t — and either takes
//! the top-scoring positions (deterministic) or samples without replacement
//! (stochastic). The handcrafted presets are particular coefficient choices.
//!
//! Positions in the public API are 0-indexed; the positional feature uses the
//! 1-indexed form −log(|t − i| + ε) so that step t prefers the t-th symbol.

use std::collections::BTreeSet;
use std::path::PathBuf;

use rand::Rng;

use crate::models::{full_sweep, MaskedConditionalModel};
use crate::nn::PROB_FLOOR;
use crate::seqcore::Sequence;
use crate::{Error, Result};

pub const DEFAULT_POS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    Stochastic,
    Deterministic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionScope {
    /// Only positions never selected before are eligible (generation passes).
    WithoutReplacement,
    /// Every position is eligible again (refinement passes).
    AllPositions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyConfig {
    pub alpha_negent: f64,
    pub alpha_logp: f64,
    pub alpha_pos: f64,
    /// Temperature in (0, ∞]; `f64::INFINITY` means exactly uniform.
    pub tau: f64,
    pub eps: f64,
    pub mode: SelectionMode,
    pub selection_scope: SelectionScope,
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Selection(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Selection(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }

    /// Combined per-position score before the 1/τ scaling.
    fn raw_score(&self, f: &FeatureVector, i: usize) -> f64 {
        self.alpha_negent * f.negent[i] + self.alpha_logp * f.logp[i] + self.alpha_pos * f.pos[i]
    }
}

/// Per-position feature triples for one selection step.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub negent: Vec<f64>,
    pub logp: Vec<f64>,
    pub pos: Vec<f64>,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.negent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.negent.is_empty()
    }
}

/// Mutable per-generation bookkeeping: the current target, the step counter,
/// the set of positions already written, and a cache of the full conditional
/// sweep (one row per position, each with only that position masked).
#[derive(Debug, Clone)]
pub struct SelectionState {
    pub y: Sequence,
    /// 1-based step counter, matching the t in the positional feature.
    pub t: usize,
    pub filled: BTreeSet<usize>,
    /// (step, position) pairs in selection order — the policy's history.
    pub history: Vec<(usize, usize)>,
    cache: Option<Vec<Vec<f64>>>,
}

impl SelectionState {
    pub fn new(y: Sequence) -> Self {
        Self { y, t: 1, filled: BTreeSet::new(), history: Vec::new(), cache: None }
    }

    /// The cached full-mask-sweep conditionals, computing them if stale.
    pub fn sweep<M: MaskedConditionalModel + ?Sized>(
        &mut self,
        model: &M,
        x: &Sequence,
    ) -> Result<&[Vec<f64>]> {
        if self.cache.is_none() {
            self.cache = Some(full_sweep(model, &self.y, x)?);
        }
        Ok(self.cache.as_deref().unwrap())
    }

    /// Records a completed step: the replacements were applied to produce
    /// `new_y`, the selected positions count as filled, and every cached
    /// conditional is stale (the models condition on full context).
    pub fn advance(&mut self, new_y: Sequence, selected: &[usize]) {
        self.y = new_y;
        self.filled.extend(selected.iter().copied());
        self.history.extend(selected.iter().map(|&p| (self.t, p)));
        self.t += 1;
        self.cache = None;
    }

    pub fn eligible(&self, scope: SelectionScope) -> Vec<usize> {
        match scope {
            SelectionScope::WithoutReplacement => {
                (0..self.y.len()).filter(|i| !self.filled.contains(i)).collect()
            }
            SelectionScope::AllPositions => (0..self.y.len()).collect(),
        }
    }
}

/// Σ p ln p of a probability row, with the 0·ln 0 = 0 convention.
pub fn negentropy(row: &[f64]) -> f64 {
    row.iter().map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 }).sum()
}

pub fn feature_negent<M: MaskedConditionalModel + ?Sized>(
    model: &M,
    state: &mut SelectionState,
    x: &Sequence,
    i: usize,
) -> Result<f64> {
    if i >= state.y.len() {
        return Err(Error::PositionOutOfRange(i, state.y.len()));
    }
    let rows = state.sweep(model, x)?;
    Ok(negentropy(&rows[i]))
}

/// −log p(current symbol at i | rest). At never-filled positions the current
/// symbol is the mask token, which is scored like any other (floored so zero
/// mass stays finite).
pub fn feature_logp<M: MaskedConditionalModel + ?Sized>(
    model: &M,
    state: &mut SelectionState,
    x: &Sequence,
    i: usize,
) -> Result<f64> {
    if i >= state.y.len() {
        return Err(Error::PositionOutOfRange(i, state.y.len()));
    }
    let current = state.y.get(i);
    let rows = state.sweep(model, x)?;
    Ok(-rows[i][current].max(PROB_FLOOR).ln())
}

/// −log(|t − i| + ε) with t and i both 1-indexed; `i` here is the 0-based
/// position, converted internally.
pub fn feature_pos(t: usize, i: usize, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::Selection(format!("eps must be positive, got {eps}")));
    }
    let delta = (t as f64 - (i + 1) as f64).abs();
    Ok(-(delta + eps).ln())
}

/// All three features for every position of the current state. The model is
/// only queried when a model-dependent feature carries nonzero weight, so
/// purely positional strategies stay query-free.
pub fn compute_features<M: MaskedConditionalModel + ?Sized>(
    model: &M,
    state: &mut SelectionState,
    x: &Sequence,
    cfg: &StrategyConfig,
) -> Result<FeatureVector> {
    let t = state.t;
    let len = state.y.len();
    let pos = (0..len).map(|i| feature_pos(t, i, cfg.eps)).collect::<Result<Vec<f64>>>()?;
    if cfg.alpha_negent == 0.0 && cfg.alpha_logp == 0.0 {
        return Ok(FeatureVector { negent: vec![0.0; len], logp: vec![0.0; len], pos });
    }
    let current: Vec<usize> = state.y.ids().to_vec();
    let rows = state.sweep(model, x)?;
    let mut negent = Vec::with_capacity(len);
    let mut logp = Vec::with_capacity(len);
    for i in 0..len {
        negent.push(negentropy(&rows[i]));
        logp.push(-rows[i][current[i]].max(PROB_FLOOR).ln());
    }
    Ok(FeatureVector { negent, logp, pos })
}

/// The Boltzmann distribution over `eligible` induced by the weighted feature
/// scores at temperature τ. τ = ∞ yields the exactly uniform row.
pub fn log_linear_distribution(
    features: &FeatureVector,
    cfg: &StrategyConfig,
    eligible: &[usize],
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if eligible.is_empty() {
        return Err(Error::Selection("empty eligible set".into()));
    }
    if cfg.tau.is_infinite() {
        return Ok(vec![1.0 / eligible.len() as f64; eligible.len()]);
    }
    let scores: Vec<f64> = eligible.iter().map(|&i| cfg.raw_score(features, i) / cfg.tau).collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return Err(Error::Numeric("log-linear normalizer is not finite".into()));
    }
    Ok(exps.iter().map(|e| e / total).collect())
}

/// Picks `o_t` positions for the current step and returns them with the
/// total coordinate log-probability of the choice.
///
/// Deterministic mode takes the top scorers (ties to the lowest index) and
/// reports log-prob 0 — the choice has probability one. Stochastic mode
/// draws without replacement, renormalizing after each draw, and sums the
/// log-probabilities of the draws actually made.
pub fn select_positions<M, R>(
    cfg: &StrategyConfig,
    model: &M,
    state: &mut SelectionState,
    x: &Sequence,
    o_t: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, f64)>
where
    M: MaskedConditionalModel + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    if o_t == 0 {
        return Err(Error::Selection("o_t must be at least 1".into()));
    }
    let eligible = state.eligible(cfg.selection_scope);
    if eligible.len() < o_t {
        return Err(Error::Selection(format!(
            "need {o_t} positions but only {} are eligible",
            eligible.len()
        )));
    }
    // the uniform strategy never looks at features; skip the model queries
    let features = if cfg.mode == SelectionMode::Stochastic && cfg.tau.is_infinite() {
        let len = state.y.len();
        FeatureVector { negent: vec![0.0; len], logp: vec![0.0; len], pos: vec![0.0; len] }
    } else {
        compute_features(model, state, x, cfg)?
    };
    match cfg.mode {
        SelectionMode::Deterministic => {
            let mut ranked: Vec<usize> = eligible;
            ranked.sort_by(|&a, &b| {
                cfg.raw_score(&features, b)
                    .partial_cmp(&cfg.raw_score(&features, a))
                    .unwrap()
                    .then(a.cmp(&b))
            });
            ranked.truncate(o_t);
            Ok((ranked, 0.0))
        }
        SelectionMode::Stochastic => {
            let mut remaining = eligible;
            let mut chosen = Vec::with_capacity(o_t);
            let mut log_prob = 0.0;
            for _ in 0..o_t {
                let dist = log_linear_distribution(&features, cfg, &remaining)?;
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = remaining.len() - 1;
                for (k, &p) in dist.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        pick = k;
                        break;
                    }
                }
                log_prob += dist[pick].max(PROB_FLOOR).ln();
                chosen.push(remaining.remove(pick));
            }
            Ok((chosen, log_prob))
        }
    }
}

/// A ready-to-run selection strategy: either the log-linear family or a
/// trained policy network loaded from a checkpoint.
#[derive(Debug, Clone)]
pub enum Strategy {
    LogLinear(StrategyConfig),
    Policy(crate::rl::SelectionPolicy),
}

impl Strategy {
    /// Whether selection is a pure function of the state (consumes no RNG).
    pub fn is_deterministic(&self) -> bool {
        match self {
            Strategy::LogLinear(cfg) => cfg.mode == SelectionMode::Deterministic,
            Strategy::Policy(_) => false,
        }
    }

    /// Picks `o_t` positions with the given eligibility scope, overriding
    /// whatever scope the underlying config carries — the decode loop decides
    /// scope per step (generation vs refinement).
    pub fn select_for_step<M, R>(
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
        match self {
            Strategy::LogLinear(cfg) => {
                let cfg = StrategyConfig { selection_scope: scope, ..cfg.clone() };
                select_positions(&cfg, model, state, x, o_t, rng)
            }
            Strategy::Policy(policy) => policy.select(model, state, x, o_t, scope, rng),
        }
    }

    /// Every eligible position ranked best-first with the log-probability it
    /// would contribute if chosen; used by beam expansion.
    pub fn rank_positions<M>(
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
        match self {
            Strategy::LogLinear(cfg) => {
                let features = compute_features(model, state, x, cfg)?;
                let mut ranked: Vec<(usize, f64)> = match cfg.mode {
                    SelectionMode::Deterministic => {
                        let mut order = eligible;
                        order.sort_by(|&a, &b| {
                            cfg.raw_score(&features, b)
                                .partial_cmp(&cfg.raw_score(&features, a))
                                .unwrap()
                                .then(a.cmp(&b))
                        });
                        order.into_iter().map(|i| (i, 0.0)).collect()
                    }
                    SelectionMode::Stochastic => {
                        let dist = log_linear_distribution(&features, cfg, &eligible)?;
                        eligible
                            .into_iter()
                            .zip(dist)
                            .map(|(i, p)| (i, p.max(PROB_FLOOR).ln()))
                            .collect()
                    }
                };
                if matches!(cfg.mode, SelectionMode::Stochastic) {
                    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
                }
                Ok(ranked)
            }
            Strategy::Policy(policy) => policy.rank(model, state, x, scope),
        }
    }
}

pub fn make_preset(name: &str) -> Result<StrategyConfig> {
    let base = StrategyConfig {
        alpha_negent: 0.0,
        alpha_logp: 0.0,
        alpha_pos: 0.0,
        tau: 1.0,
        eps: DEFAULT_POS_EPS,
        mode: SelectionMode::Deterministic,
        selection_scope: SelectionScope::WithoutReplacement,
    };
    match name {
        "uniform" => Ok(StrategyConfig {
            tau: f64::INFINITY,
            mode: SelectionMode::Stochastic,
            ..base
        }),
        "left2right" => Ok(StrategyConfig { alpha_pos: 1.0, ..base }),
        "least2most" => Ok(StrategyConfig { alpha_logp: 1.0, ..base }),
        "easy_first" => Ok(StrategyConfig { alpha_negent: 1.0, alpha_logp: 1.0, ..base }),
        "hard_first" => Ok(StrategyConfig { alpha_negent: -1.0, alpha_logp: -1.0, ..base }),
        other => Err(Error::Selection(format!("unknown preset {other:?}"))),
    }
}

/// A strategy spec as it appears in configs and on the command line, before
/// any checkpoint loading has happened.
#[derive(Debug, Clone, PartialEq)]
pub enum StrategySpec {
    LogLinear(StrategyConfig),
    Policy(PathBuf),
}

/// Parses `preset:<name>`, `loglinear:a_ne=..,a_lp=..,a_pos=..,tau=..`, or
/// `policy:<checkpoint path>`. The loglinear form also accepts optional
/// `eps=..`, `mode=deterministic|stochastic`, and `scope=fresh|all` keys.
pub fn parse_strategy_spec(s: &str) -> Result<StrategySpec> {
    let (kind, rest) = s
        .split_once(':')
        .ok_or_else(|| Error::Selection(format!("strategy spec {s:?} missing ':'")))?;
    match kind {
        "preset" => Ok(StrategySpec::LogLinear(make_preset(rest)?)),
        "policy" => {
            if rest.is_empty() {
                return Err(Error::Selection("policy spec needs a checkpoint path".into()));
            }
            Ok(StrategySpec::Policy(PathBuf::from(rest)))
        }
        "loglinear" => {
            let mut cfg = StrategyConfig {
                alpha_negent: 0.0,
                alpha_logp: 0.0,
                alpha_pos: 0.0,
                tau: 1.0,
                eps: DEFAULT_POS_EPS,
                mode: SelectionMode::Deterministic,
                selection_scope: SelectionScope::WithoutReplacement,
            };
            for kv in rest.split(',').filter(|p| !p.is_empty()) {
                let (key, value) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::Selection(format!("bad key=value pair {kv:?}")))?;
                let parse_num = |v: &str| -> Result<f64> {
                    if v == "inf" {
                        return Ok(f64::INFINITY);
                    }
                    v.parse()
                        .map_err(|_| Error::Selection(format!("bad number {v:?} for {key:?}")))
                };
                match key {
                    "a_ne" => cfg.alpha_negent = parse_num(value)?,
                    "a_lp" => cfg.alpha_logp = parse_num(value)?,
                    "a_pos" => cfg.alpha_pos = parse_num(value)?,
                    "tau" => cfg.tau = parse_num(value)?,
                    "eps" => cfg.eps = parse_num(value)?,
                    "mode" => {
                        cfg.mode = match value {
                            "deterministic" => SelectionMode::Deterministic,
                            "stochastic" => SelectionMode::Stochastic,
                            other => {
                                return Err(Error::Selection(format!("unknown mode {other:?}")))
                            }
                        }
                    }
                    "scope" => {
                        cfg.selection_scope = match value {
                            "fresh" => SelectionScope::WithoutReplacement,
                            "all" => SelectionScope::AllPositions,
                            other => {
                                return Err(Error::Selection(format!("unknown scope {other:?}")))
                            }
                        }
                    }
                    other => return Err(Error::Selection(format!("unknown key {other:?}"))),
                }
            }
            cfg.validate()?;
            Ok(StrategySpec::LogLinear(cfg))
        }
        other => Err(Error::Selection(format!("unknown strategy kind {other:?}"))),
    }
}
