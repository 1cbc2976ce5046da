//! Generation procedures: the generalized decode loop, the special-case
//! decoders it subsumes (autoregressive, semi-autoregressive, iterative
//! refinement), Gibbs sampling, length-conditioned beam search with its
//! brute-force oracle, Monte Carlo decoding, and length-candidate rescoring.
//!
//! Symbol replacement is always restricted to content tokens: specials
//! (<pad>, <mask>, <sep>, <eos>) never appear inside a generated target, and
//! probability rows are renormalized over the content alphabet before use.
//! For models whose mass already lives on content symbols the renormalization
//! is the identity.

use std::collections::BTreeMap;

use rand::Rng;

use crate::models::{
    length_candidates, pseudo_log_likelihood, ArModel, LengthDistribution, MaskedConditionalModel,
};
use crate::nn::PROB_FLOOR;
use crate::selection::{SelectionScope, SelectionState, Strategy};
use crate::seqcore::{
    apply_step, init_state, CoordinateMask, GenerationStep, GenerationTrace, Sequence,
};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// schedules

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleMode {
    /// One symbol per step; T must cover the length at least once.
    LinearTime,
    /// o_t = ⌈L/T⌉, truncated so the budget is exactly max(L, T).
    ConstantCeil,
    /// o_t follows the line from L at t=1 down to 1 at t=T.
    ConstantAnneal,
}

/// Schedule selection as it appears in configs: the iteration budget is
/// derived from the target length at decode time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleSpec {
    /// T = passes · L (one pass generates, a second refines).
    LinearTime { passes: usize },
    ConstantCeil { t: usize },
    ConstantAnneal { t: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub mode: ScheduleMode,
    pub tokens: Vec<usize>,
}

impl ScheduleSpec {
    pub fn build(&self, l: usize) -> Result<Schedule> {
        match *self {
            ScheduleSpec::LinearTime { passes } => {
                if passes == 0 {
                    return Err(Error::Config("linear_time needs at least one pass".into()));
                }
                Ok(Schedule {
                    mode: ScheduleMode::LinearTime,
                    tokens: schedule_tokens(ScheduleMode::LinearTime, l, passes * l)?,
                })
            }
            ScheduleSpec::ConstantCeil { t } => Ok(Schedule {
                mode: ScheduleMode::ConstantCeil,
                tokens: schedule_tokens(ScheduleMode::ConstantCeil, l, t)?,
            }),
            ScheduleSpec::ConstantAnneal { t } => Ok(Schedule {
                mode: ScheduleMode::ConstantAnneal,
                tokens: schedule_tokens(ScheduleMode::ConstantAnneal, l, t)?,
            }),
        }
    }
}

/// The per-step replacement counts o_1..o_T.
///
/// Ceil mode spends ⌈L/T⌉ per step against a total budget of exactly
/// max(L, T), trimming late steps so every step still gets at least one
/// token. Anneal mode rounds the straight line from L down to 1 (half away
/// from zero) and clamps at 1. Linear time is all ones and requires T ≥ L so
/// every position can be filled.
pub fn schedule_tokens(mode: ScheduleMode, l: usize, t: usize) -> Result<Vec<usize>> {
    if l == 0 {
        return Err(Error::InvalidLength("length must be >= 1".into()));
    }
    if t == 0 {
        return Err(Error::Config("iteration budget T must be >= 1".into()));
    }
    match mode {
        ScheduleMode::LinearTime => {
            if t < l {
                return Err(Error::Config(format!(
                    "linear_time budget T={t} cannot cover length {l}"
                )));
            }
            Ok(vec![1; t])
        }
        ScheduleMode::ConstantCeil => {
            let per_step = l.div_ceil(t);
            let total = l.max(t);
            let mut tokens = Vec::with_capacity(t);
            let mut consumed = 0;
            for step in 0..t {
                let steps_after = t - step - 1;
                let o = per_step.min(total - consumed - steps_after);
                tokens.push(o);
                consumed += o;
            }
            debug_assert_eq!(consumed, total);
            Ok(tokens)
        }
        ScheduleMode::ConstantAnneal => {
            if t == 1 {
                return Ok(vec![l]);
            }
            let tokens = (0..t)
                .map(|step| {
                    let frac = step as f64 / (t - 1) as f64;
                    let o = (l as f64 + (1.0 - l as f64) * frac).round() as usize;
                    o.max(1)
                })
                .collect();
            Ok(tokens)
        }
    }
}

// ---------------------------------------------------------------------------
// decode configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SymbolChoice {
    /// Argmax of the conditional row (ties to the lowest token id).
    Greedy,
    /// Sample from the conditional row.
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rescorer {
    PseudoLl,
    ArModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub schedule: ScheduleSpec,
    pub symbol_choice: SymbolChoice,
    pub beam_k: usize,
    pub beam_kp: usize,
    pub beam_kpp: usize,
    pub n_length_candidates: usize,
    pub rescoring: Rescorer,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleSpec::LinearTime { passes: 1 },
            symbol_choice: SymbolChoice::Greedy,
            beam_k: 1,
            beam_kp: 1,
            beam_kpp: 1,
            n_length_candidates: 1,
            rescoring: Rescorer::PseudoLl,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_k == 0 || self.beam_kp == 0 || self.beam_kpp == 0 {
            return Err(Error::Config("beam widths K, K', K'' must be >= 1".into()));
        }
        if self.n_length_candidates == 0 {
            return Err(Error::Config("need at least one length candidate".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// symbol replacement helpers

/// Probability row restricted to the content alphabet and renormalized.
/// A row with no content mass falls back to uniform.
pub(crate) fn content_probs(row: &[f64], content: &[usize]) -> Vec<f64> {
    let total: f64 = content.iter().map(|&c| row[c]).sum();
    if total > 0.0 {
        content.iter().map(|&c| row[c] / total).collect()
    } else {
        vec![1.0 / content.len() as f64; content.len()]
    }
}

pub(crate) fn greedy_symbol(row: &[f64], content: &[usize]) -> (usize, f64) {
    let probs = content_probs(row, content);
    let mut best = 0;
    for (k, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = k;
        }
    }
    (content[best], probs[best].max(PROB_FLOOR).ln())
}

fn sample_symbol<R: Rng + ?Sized>(row: &[f64], content: &[usize], rng: &mut R) -> (usize, f64) {
    let probs = content_probs(row, content);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut pick = probs.len() - 1;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            pick = k;
            break;
        }
    }
    (content[pick], probs[pick].max(PROB_FLOOR).ln())
}

/// Scope rule shared by every decoder: fill never-touched positions first;
/// once everything has been written at least once, refinement may revisit.
fn step_scope(state: &SelectionState, o_t: usize) -> SelectionScope {
    if state.eligible(SelectionScope::WithoutReplacement).len() >= o_t {
        SelectionScope::WithoutReplacement
    } else {
        SelectionScope::AllPositions
    }
}

// ---------------------------------------------------------------------------
// the generalized decode loop

/// Runs the full generation loop: all-mask start, T selection/replacement
/// steps per the schedule, one parallel conditional query per step.
pub fn generate<M, R>(
    model: &M,
    strategy: &Strategy,
    x: &Sequence,
    l: usize,
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<GenerationTrace>
where
    M: MaskedConditionalModel + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let vocab = model.vocab();
    let content = vocab.content_ids();
    let schedule = cfg.schedule.build(l)?;
    let (y1, _) = init_state(l, vocab)?;
    let mut trace = GenerationTrace::new(x.clone(), l, model.length_log_prob(x, l));
    trace.intermediates.push(y1.clone());
    let mut state = SelectionState::new(y1);
    for &o_t in &schedule.tokens {
        let scope = step_scope(&state, o_t);
        let (positions, coord_lp) = strategy.select_for_step(model, &mut state, x, o_t, scope, rng)?;
        let rows = model.conditional(&state.y, &positions, x)?;
        let mut replacements = BTreeMap::new();
        let mut symbol_lp = 0.0;
        for (&p, row) in positions.iter().zip(&rows) {
            let (tok, lp) = match cfg.symbol_choice {
                SymbolChoice::Greedy => greedy_symbol(row, &content),
                SymbolChoice::Sample => sample_symbol(row, &content, rng),
            };
            replacements.insert(p, tok);
            symbol_lp += lp;
        }
        let step = GenerationStep::new(
            CoordinateMask::from_positions(l, &positions)?,
            replacements,
            coord_lp,
            symbol_lp,
        )?;
        let next = apply_step(&state.y, &step)?;
        trace.steps.push(step);
        trace.intermediates.push(next.clone());
        state.advance(next, &positions);
    }
    if trace.final_sequence().contains_mask(vocab) {
        return Err(Error::Decode("schedule left unfilled positions".into()));
    }
    Ok(trace)
}

// ---------------------------------------------------------------------------
// special cases

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecialMode {
    /// Left to right, one symbol per step.
    Ar,
    /// Consecutive chunks of k symbols per step.
    SemiAr(usize),
    /// Every step re-predicts all positions in parallel, T times.
    NarRefine(usize),
}

/// The classical decoders as fixed coordinate schedules with greedy symbols.
pub fn special_case_decode<M>(
    model: &M,
    x: &Sequence,
    l: usize,
    mode: SpecialMode,
) -> Result<GenerationTrace>
where
    M: MaskedConditionalModel + ?Sized,
{
    let groups: Vec<Vec<usize>> = match mode {
        SpecialMode::Ar => (0..l).map(|i| vec![i]).collect(),
        SpecialMode::SemiAr(k) => {
            if k == 0 {
                return Err(Error::Config("semi_ar group size must be >= 1".into()));
            }
            (0..l).collect::<Vec<_>>().chunks(k).map(|c| c.to_vec()).collect()
        }
        SpecialMode::NarRefine(t) => {
            if t == 0 {
                return Err(Error::Config("nar_refine needs at least one step".into()));
            }
            vec![(0..l).collect(); t]
        }
    };
    decode_fixed_positions(model, x, l, &groups)
}

/// Greedy decoding along an explicit position schedule, probability-one
/// coordinate choices.
fn decode_fixed_positions<M>(
    model: &M,
    x: &Sequence,
    l: usize,
    groups: &[Vec<usize>],
) -> Result<GenerationTrace>
where
    M: MaskedConditionalModel + ?Sized,
{
    let vocab = model.vocab();
    let content = vocab.content_ids();
    let (y1, _) = init_state(l, vocab)?;
    let mut trace = GenerationTrace::new(x.clone(), l, model.length_log_prob(x, l));
    trace.intermediates.push(y1.clone());
    let mut y = y1;
    for group in groups {
        let rows = model.conditional(&y, group, x)?;
        let mut replacements = BTreeMap::new();
        let mut symbol_lp = 0.0;
        for (&p, row) in group.iter().zip(&rows) {
            let (tok, lp) = greedy_symbol(row, &content);
            replacements.insert(p, tok);
            symbol_lp += lp;
        }
        let step = GenerationStep::new(
            CoordinateMask::from_positions(l, group)?,
            replacements,
            0.0,
            symbol_lp,
        )?;
        y = apply_step(&y, &step)?;
        trace.steps.push(step);
        trace.intermediates.push(y.clone());
    }
    if trace.final_sequence().contains_mask(vocab) {
        return Err(Error::Decode("position schedule left unfilled positions".into()));
    }
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Gibbs sampling

/// One-coordinate-at-a-time resampling. The start state is one parallel
/// sample of every position from the all-mask conditionals; each step then
/// picks a single coordinate by the strategy (forced stochastic, every
/// position always eligible) and resamples it. Returns the state after every
/// step.
pub fn gibbs_sample<M, R>(
    model: &M,
    x: &Sequence,
    l: usize,
    n_steps: usize,
    strategy: &crate::selection::StrategyConfig,
    rng: &mut R,
) -> Result<Vec<Sequence>>
where
    M: MaskedConditionalModel + ?Sized,
    R: Rng + ?Sized,
{
    if n_steps == 0 {
        return Err(Error::Config("gibbs needs at least one step".into()));
    }
    let vocab = model.vocab();
    let content = vocab.content_ids();
    let proposal = crate::selection::StrategyConfig {
        mode: crate::selection::SelectionMode::Stochastic,
        selection_scope: SelectionScope::AllPositions,
        ..strategy.clone()
    };
    let (y1, _) = init_state(l, vocab)?;
    let rows = model.conditional(&y1, &(0..l).collect::<Vec<_>>(), x)?;
    let mut ids = Vec::with_capacity(l);
    for row in &rows {
        ids.push(sample_symbol(row, &content, rng).0);
    }
    let mut state = SelectionState::new(Sequence::from_ids(ids));
    let mut out = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        let (positions, _) = crate::selection::select_positions(
            &proposal, model, &mut state, x, 1, rng,
        )?;
        let p = positions[0];
        let row = model.conditional(&state.y, &[p], x)?.remove(0);
        let (tok, _) = sample_symbol(&row, &content, rng);
        let mut ids = state.y.ids().to_vec();
        ids[p] = tok;
        let next = Sequence::from_ids(ids);
        out.push(next.clone());
        state.advance(next, &positions);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// length-conditioned beam search

struct Hyp {
    state: SelectionState,
    trace: GenerationTrace,
    score: f64,
}

/// Beam over (position, symbol) expansions: per step each hypothesis offers
/// its top-K′ positions, each with its top-K″ symbols, and the global top-K
/// by score survive. Scores are the length term plus accumulated coordinate
/// and symbol log-probabilities. Deterministic given its inputs.
pub fn beam_search<M>(
    model: &M,
    strategy: &Strategy,
    x: &Sequence,
    l: usize,
    cfg: &DecodeConfig,
) -> Result<Vec<(GenerationTrace, f64)>>
where
    M: MaskedConditionalModel + ?Sized,
{
    beam_search_impl(model, strategy, x, l, cfg, false)
}

/// Mutation-test entry point: `skip_top_symbol` injects an off-by-one into
/// the symbol expansion so the oracle suite can prove its beam-vs-brute-force
/// check has teeth. Not part of the supported API.
#[doc(hidden)]
pub fn beam_search_impl<M>(
    model: &M,
    strategy: &Strategy,
    x: &Sequence,
    l: usize,
    cfg: &DecodeConfig,
    skip_top_symbol: bool,
) -> Result<Vec<(GenerationTrace, f64)>>
where
    M: MaskedConditionalModel + ?Sized,
{
    cfg.validate()?;
    let vocab = model.vocab();
    let content = vocab.content_ids();
    let mut kpp = cfg.beam_kpp;
    if kpp > content.len() {
        eprintln!(
            "warning: K''={} exceeds the {}-symbol content alphabet; clamping",
            kpp,
            content.len()
        );
        kpp = content.len();
    }
    let schedule = cfg.schedule.build(l)?;
    if schedule.tokens.iter().any(|&o| o != 1) {
        return Err(Error::Config("beam search requires a one-symbol-per-step schedule".into()));
    }
    let length_lp = model.length_log_prob(x, l);
    let (y1, _) = init_state(l, vocab)?;
    let mut trace = GenerationTrace::new(x.clone(), l, length_lp);
    trace.intermediates.push(y1.clone());
    let mut beam = vec![Hyp { state: SelectionState::new(y1), trace, score: length_lp }];

    for _ in &schedule.tokens {
        // candidate: (score, hyp index, position, token, coord_lp, symbol_lp)
        let mut candidates: Vec<(f64, usize, usize, usize, f64, f64)> = Vec::new();
        for (h_idx, hyp) in beam.iter_mut().enumerate() {
            let scope = step_scope(&hyp.state, 1);
            let ranked = strategy.rank_positions(model, &mut hyp.state, x, scope)?;
            for &(pos, coord_lp) in ranked.iter().take(cfg.beam_kp) {
                let row = model.conditional(&hyp.state.y, &[pos], x)?.remove(0);
                let probs = content_probs(&row, &content);
                let mut order: Vec<usize> = (0..content.len()).collect();
                order.sort_by(|&a, &b| {
                    probs[b].partial_cmp(&probs[a]).unwrap().then(content[a].cmp(&content[b]))
                });
                let start = usize::from(skip_top_symbol && order.len() > 1);
                for &k in order.iter().skip(start).take(kpp) {
                    let sym_lp = probs[k].max(PROB_FLOOR).ln();
                    candidates.push((
                        hyp.score + coord_lp + sym_lp,
                        h_idx,
                        pos,
                        content[k],
                        coord_lp,
                        sym_lp,
                    ));
                }
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
                .then(a.3.cmp(&b.3))
        });
        candidates.truncate(cfg.beam_k);
        let mut next_beam = Vec::with_capacity(candidates.len());
        for (score, h_idx, pos, tok, coord_lp, sym_lp) in candidates {
            let parent = &beam[h_idx];
            let step = GenerationStep::new(
                CoordinateMask::from_positions(l, &[pos])?,
                BTreeMap::from([(pos, tok)]),
                coord_lp,
                sym_lp,
            )?;
            let y_next = apply_step(&parent.state.y, &step)?;
            let mut trace = parent.trace.clone();
            trace.steps.push(step);
            trace.intermediates.push(y_next.clone());
            let mut state = parent.state.clone();
            state.advance(y_next, &[pos]);
            next_beam.push(Hyp { state, trace, score });
        }
        beam = next_beam;
    }
    beam.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    Ok(beam.into_iter().map(|h| (h.trace, h.score)).collect())
}

// ---------------------------------------------------------------------------
// brute-force oracle

/// Exhaustive argmax over the beam's search space: every eligibility-
/// respecting position sequence of length T crossed with every content-symbol
/// assignment, scored by length term plus symbol log-probabilities (the
/// deterministic coordinate convention contributes zero). Ties resolve to the
/// lexicographically first (position, token) path. Guarded to small
/// instances.
pub fn brute_force_optimistic<M>(
    model: &M,
    x: &Sequence,
    l: usize,
    t: usize,
) -> Result<GenerationTrace>
where
    M: MaskedConditionalModel + ?Sized,
{
    if t == 0 {
        return Err(Error::Config("need at least one step".into()));
    }
    let vocab = model.vocab();
    let content = vocab.content_ids();
    let paths = ((l * content.len()) as f64).powi(t as i32);
    if !(paths <= 1e6) {
        return Err(Error::TooLarge(format!(
            "{paths:.0} candidate paths exceed the 1e6 enumeration guard"
        )));
    }
    let (y1, _) = init_state(l, vocab)?;
    let length_lp = model.length_log_prob(x, l);

    struct Search<'a, M: ?Sized> {
        model: &'a M,
        x: &'a Sequence,
        content: &'a [usize],
        best: Option<(f64, Vec<(usize, usize, f64)>)>,
        path: Vec<(usize, usize, f64)>,
    }

    impl<M: MaskedConditionalModel + ?Sized> Search<'_, M> {
        fn dfs(&mut self, y: &Sequence, filled: &mut Vec<bool>, left: usize, score: f64) -> Result<()> {
            if left == 0 {
                if self.best.as_ref().map_or(true, |(b, _)| score > *b) {
                    self.best = Some((score, self.path.clone()));
                }
                return Ok(());
            }
            let unfilled: Vec<usize> =
                (0..y.len()).filter(|&i| !filled[i]).collect();
            let eligible = if unfilled.is_empty() { (0..y.len()).collect() } else { unfilled };
            for pos in eligible {
                let row = self.model.conditional(y, &[pos], self.x)?.remove(0);
                let probs = content_probs(&row, self.content);
                let was_filled = filled[pos];
                filled[pos] = true;
                for (k, &tok) in self.content.iter().enumerate() {
                    let lp = probs[k].max(PROB_FLOOR).ln();
                    let mut ids = y.ids().to_vec();
                    ids[pos] = tok;
                    self.path.push((pos, tok, lp));
                    self.dfs(&Sequence::from_ids(ids), filled, left - 1, score + lp)?;
                    self.path.pop();
                }
                filled[pos] = was_filled;
            }
            Ok(())
        }
    }

    let mut search = Search { model, x, content: &content, best: None, path: Vec::new() };
    let mut filled = vec![false; l];
    search.dfs(&y1, &mut filled, t, length_lp)?;
    let (_, path) = search.best.expect("nonempty search space");

    let mut trace = GenerationTrace::new(x.clone(), l, length_lp);
    trace.intermediates.push(y1.clone());
    let mut y = y1;
    for (pos, tok, lp) in path {
        let step = GenerationStep::new(
            CoordinateMask::from_positions(l, &[pos])?,
            BTreeMap::from([(pos, tok)]),
            0.0,
            lp,
        )?;
        y = apply_step(&y, &step)?;
        trace.steps.push(step);
        trace.intermediates.push(y.clone());
    }
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Monte Carlo decoding

/// Draws M stochastic traces and keeps the final sequence with the best
/// pseudo-log-likelihood. The high-variance baseline to beam search.
pub fn monte_carlo_decode<M, R>(
    model: &M,
    strategy: &Strategy,
    x: &Sequence,
    l: usize,
    m: usize,
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<(Sequence, f64)>
where
    M: MaskedConditionalModel + ?Sized,
    R: Rng + ?Sized,
{
    if m == 0 {
        return Err(Error::Config("need at least one Monte Carlo sample".into()));
    }
    let sample_cfg = DecodeConfig { symbol_choice: SymbolChoice::Sample, ..cfg.clone() };
    let mut best: Option<(Sequence, f64)> = None;
    for _ in 0..m {
        let trace = generate(model, strategy, x, l, &sample_cfg, rng)?;
        let y = trace.final_sequence().clone();
        let pll = pseudo_log_likelihood(model, &y, x)?;
        if best.as_ref().map_or(true, |(_, b)| pll > *b) {
            best = Some((y, pll));
        }
    }
    Ok(best.expect("m >= 1"))
}

// ---------------------------------------------------------------------------
// length-candidate rescoring

#[derive(Debug, Clone, PartialEq)]
pub struct LengthCandidateResult {
    pub len: usize,
    pub length_log_prob: f64,
    pub rescore: f64,
    pub sequence: Sequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LengthDecodeReport {
    pub chosen: Sequence,
    pub chosen_length: usize,
    pub candidates: Vec<LengthCandidateResult>,
}

/// Decodes once per candidate target length and keeps the winner under the
/// configured rescorer (ties go to the shorter candidate).
///
/// Pseudo-likelihood candidate scores combine the length prior with the
/// per-token fit, log p(L|X) + pseudo_ll(Y)/L: the raw pseudo-likelihood sum
/// shrinks mechanically with every extra token, so comparing it across
/// lengths just picks the shortest hypothesis, while the per-token average
/// puts the fit term on a length-free scale and lets the prior arbitrate
/// between lengths the model fits comparably well. The AR rescorer needs no
/// such correction — its end-of-sequence factor already prices the length.
pub fn decode_with_length_candidates<M, R>(
    model: &M,
    ldist: &LengthDistribution,
    x: &Sequence,
    strategy: &Strategy,
    cfg: &DecodeConfig,
    ar: Option<&ArModel>,
    rng: &mut R,
) -> Result<LengthDecodeReport>
where
    M: MaskedConditionalModel + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    if cfg.rescoring == Rescorer::ArModel && ar.is_none() {
        return Err(Error::Config("ar_model rescoring needs an autoregressive model".into()));
    }
    let cands = length_candidates(ldist, x, cfg.n_length_candidates)?;
    let mut results = Vec::with_capacity(cands.len());
    for cand in &cands {
        let y = if cfg.beam_k > 1 {
            beam_search(model, strategy, x, cand.len, cfg)?
                .into_iter()
                .next()
                .expect("beam returns at least one hypothesis")
                .0
                .final_sequence()
                .clone()
        } else {
            generate(model, strategy, x, cand.len, cfg, rng)?.final_sequence().clone()
        };
        let rescore = match cfg.rescoring {
            Rescorer::PseudoLl => {
                cand.log_prob + pseudo_log_likelihood(model, &y, x)? / y.len() as f64
            }
            Rescorer::ArModel => ar.unwrap().log_prob(&y, x)?,
        };
        results.push(LengthCandidateResult {
            len: cand.len,
            length_log_prob: cand.log_prob,
            rescore,
            sequence: y,
        });
    }
    let mut best = 0;
    for k in 1..results.len() {
        let better = results[k].rescore > results[best].rescore
            || (results[k].rescore == results[best].rescore
                && results[k].len < results[best].len);
        if better {
            best = k;
        }
    }
    Ok(LengthDecodeReport {
        chosen: results[best].sequence.clone(),
        chosen_length: results[best].len,
        candidates: results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::TabularJointModel;
    use crate::selection::make_preset;
    use crate::seqcore::{trace_score, validate_trace, Vocabulary};
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// RNG that fails the test if any randomness is consumed.
    struct PanicRng;

    impl RngCore for PanicRng {
        fn next_u32(&mut self) -> u32 {
            panic!("deterministic path consumed randomness");
        }
        fn next_u64(&mut self) -> u64 {
            panic!("deterministic path consumed randomness");
        }
        fn fill_bytes(&mut self, _dest: &mut [u8]) {
            panic!("deterministic path consumed randomness");
        }
        fn try_fill_bytes(&mut self, _dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
            panic!("deterministic path consumed randomness");
        }
    }

    fn bare_vocab(n_content: usize) -> Vocabulary {
        let mut toks = vec!["<pad>".to_string(), "<mask>".to_string()];
        for k in 0..n_content {
            toks.push(format!("c{k}"));
        }
        Vocabulary::new(toks, 1, 0).unwrap()
    }

    fn content_model(n_content: usize, lengths: &[usize], seed: u64) -> TabularJointModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TabularJointModel::random_content(bare_vocab(n_content), lengths, &mut rng).unwrap()
    }

    fn l2r() -> Strategy {
        Strategy::LogLinear(make_preset("left2right").unwrap())
    }

    fn uniform() -> Strategy {
        Strategy::LogLinear(make_preset("uniform").unwrap())
    }

    #[test]
    fn schedule_golden_vectors() {
        let ceil = |l, t| schedule_tokens(ScheduleMode::ConstantCeil, l, t).unwrap();
        assert_eq!(ceil(10, 5), vec![2, 2, 2, 2, 2]);
        assert_eq!(ceil(10, 4), vec![3, 3, 3, 1]);
        assert_eq!(ceil(5, 4), vec![2, 1, 1, 1]);
        assert_eq!(ceil(3, 5), vec![1, 1, 1, 1, 1]);
        assert_eq!(ceil(7, 1), vec![7]);

        let anneal = |l, t| schedule_tokens(ScheduleMode::ConstantAnneal, l, t).unwrap();
        assert_eq!(anneal(4, 4), vec![4, 3, 2, 1]);
        assert_eq!(anneal(10, 3), vec![10, 6, 1]);
        assert_eq!(anneal(10, 1), vec![10]);
        assert_eq!(anneal(1, 3), vec![1, 1, 1]);

        assert_eq!(
            schedule_tokens(ScheduleMode::LinearTime, 4, 8).unwrap(),
            vec![1; 8]
        );
        assert!(schedule_tokens(ScheduleMode::LinearTime, 4, 3).is_err());
    }

    #[test]
    fn schedule_budget_covers_length() {
        for l in 1..12usize {
            for t in 1..12usize {
                for mode in [ScheduleMode::ConstantCeil, ScheduleMode::ConstantAnneal] {
                    let toks = schedule_tokens(mode, l, t).unwrap();
                    assert_eq!(toks.len(), t);
                    assert!(toks.iter().all(|&o| o >= 1));
                    assert!(toks.iter().sum::<usize>() >= l, "{mode:?} l={l} t={t}");
                }
                let toks = schedule_tokens(ScheduleMode::ConstantCeil, l, t).unwrap();
                assert_eq!(toks.iter().sum::<usize>(), l.max(t));
            }
        }
    }

    #[test]
    fn left2right_generate_equals_ar_special_case() {
        let model = content_model(3, &[4], 0);
        let x = Sequence::empty();
        let cfg = DecodeConfig::default();
        let via_generate = generate(&model, &l2r(), &x, 4, &cfg, &mut PanicRng).unwrap();
        let via_special = special_case_decode(&model, &x, 4, SpecialMode::Ar).unwrap();
        assert_eq!(via_generate, via_special);
    }

    #[test]
    fn stochastic_generate_is_seed_reproducible() {
        let model = content_model(3, &[5], 1);
        let x = Sequence::empty();
        let cfg = DecodeConfig::default();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            generate(&model, &uniform(), &x, 5, &cfg, &mut rng).unwrap()
        };
        assert_eq!(run(9), run(9));
        // traces validate and end mask-free
        let trace = run(9);
        assert!(validate_trace(&trace, model.vocab()).is_empty());
        assert!(!trace.final_sequence().contains_mask(model.vocab()));
    }

    #[test]
    fn anneal_t2_replaces_l_then_one() {
        let model = content_model(2, &[4], 2);
        let x = Sequence::empty();
        let cfg = DecodeConfig {
            schedule: ScheduleSpec::ConstantAnneal { t: 2 },
            ..DecodeConfig::default()
        };
        let trace = generate(&model, &l2r(), &x, 4, &cfg, &mut PanicRng).unwrap();
        assert_eq!(trace.steps.len(), 2);
        assert_eq!(trace.steps[0].coords.popcount(), 4);
        assert_eq!(trace.steps[1].coords.popcount(), 1);
    }

    #[test]
    fn budget_law_holds_across_schedules() {
        let model = content_model(2, &[5], 3);
        let x = Sequence::empty();
        for spec in [
            ScheduleSpec::LinearTime { passes: 1 },
            ScheduleSpec::LinearTime { passes: 2 },
            ScheduleSpec::ConstantCeil { t: 2 },
            ScheduleSpec::ConstantCeil { t: 8 },
            ScheduleSpec::ConstantAnneal { t: 3 },
        ] {
            let cfg = DecodeConfig { schedule: spec, ..DecodeConfig::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let trace = generate(&model, &uniform(), &x, 5, &cfg, &mut rng).unwrap();
            let tokens = spec.build(5).unwrap().tokens;
            assert_eq!(trace.steps.len(), tokens.len());
            let placed: usize = trace.steps.iter().map(|s| s.coords.popcount()).sum();
            assert_eq!(placed, tokens.iter().sum::<usize>());
            assert!(validate_trace(&trace, model.vocab()).is_empty());
        }
    }

    #[test]
    fn semi_ar_degenerate_groups() {
        let model = content_model(3, &[5], 4);
        let x = Sequence::empty();
        let ar = special_case_decode(&model, &x, 5, SpecialMode::Ar).unwrap();
        let k1 = special_case_decode(&model, &x, 5, SpecialMode::SemiAr(1)).unwrap();
        assert_eq!(ar, k1);
        let kl = special_case_decode(&model, &x, 5, SpecialMode::SemiAr(5)).unwrap();
        let nar1 = special_case_decode(&model, &x, 5, SpecialMode::NarRefine(1)).unwrap();
        assert_eq!(kl, nar1);
        assert_eq!(kl.steps.len(), 1);
        assert!(special_case_decode(&model, &x, 5, SpecialMode::SemiAr(0)).is_err());
    }

    #[test]
    fn ar_trace_score_matches_chain_rule_oracle() {
        let model = content_model(3, &[3], 5);
        let vocab = model.vocab().clone();
        let content = vocab.content_ids();
        let x = Sequence::empty();
        let trace = special_case_decode(&model, &x, 3, SpecialMode::Ar).unwrap();
        let score = trace_score(&trace, &vocab).unwrap();

        // independent chain-rule greedy walk
        let mut y = Sequence::from_ids(vec![vocab.mask_id(); 3]);
        let mut oracle = 0.0;
        for i in 0..3 {
            let row = model.conditional(&y, &[i], &x).unwrap().remove(0);
            let total: f64 = content.iter().map(|&c| row[c]).sum();
            let (mut best_tok, mut best_p) = (content[0], row[content[0]] / total);
            for &c in &content[1..] {
                if row[c] / total > best_p {
                    best_p = row[c] / total;
                    best_tok = c;
                }
            }
            oracle += best_p.ln();
            let mut ids = y.ids().to_vec();
            ids[i] = best_tok;
            y = Sequence::from_ids(ids);
        }
        assert!((score.total - score.length_term - oracle).abs() < 1e-12);
        assert_eq!(trace.final_sequence(), &y);
    }

    #[test]
    fn gibbs_absorbs_at_point_mass_and_reproduces() {
        let vocab = bare_vocab(2);
        let a = vocab.id_of("c0").unwrap();
        let b = vocab.id_of("c1").unwrap();
        let target = Sequence::from_ids(vec![a, b, a]);
        let model = TabularJointModel::point_mass(vocab, &target).unwrap();
        let x = Sequence::empty();
        let strategy = make_preset("uniform").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let states = gibbs_sample(&model, &x, 3, 40, &strategy, &mut rng).unwrap();
        for s in &states {
            assert_eq!(s, &target);
        }

        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            gibbs_sample(&model, &x, 3, 10, &strategy, &mut rng).unwrap()
        };
        assert_eq!(run(7), run(7));
    }

    #[test]
    fn gibbs_stationary_distribution_matches_eigenanalysis() {
        let model = content_model(2, &[2], 6);
        let vocab = model.vocab().clone();
        let content = vocab.content_ids();
        let x = Sequence::empty();

        // explicit 4-state chain: uniform coordinate pick then conditional
        // resample at that coordinate
        let states: Vec<Vec<usize>> = content
            .iter()
            .flat_map(|&u| content.iter().map(move |&v| vec![u, v]))
            .collect();
        let idx = |ids: &[usize]| states.iter().position(|s| s == ids).unwrap();
        let n = states.len();
        let mut p = vec![vec![0.0f64; n]; n];
        for (si, s) in states.iter().enumerate() {
            for i in 0..2 {
                let row =
                    model.conditional(&Sequence::from_ids(s.clone()), &[i], &x).unwrap().remove(0);
                let total: f64 = content.iter().map(|&c| row[c]).sum();
                for &c in &content {
                    let mut s2 = s.clone();
                    s2[i] = c;
                    p[si][idx(&s2)] += 0.5 * row[c] / total;
                }
            }
        }
        // stationary vector by power iteration
        let mut v = vec![1.0 / n as f64; n];
        for _ in 0..10_000 {
            let mut next = vec![0.0; n];
            for (si, row) in p.iter().enumerate() {
                for (sj, &pij) in row.iter().enumerate() {
                    next[sj] += v[si] * pij;
                }
            }
            v = next;
        }

        let strategy = make_preset("uniform").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let samples = gibbs_sample(&model, &x, 2, 51_000, &strategy, &mut rng).unwrap();
        let mut counts = vec![0usize; n];
        for s in &samples[1000..] {
            counts[idx(s.ids())] += 1;
        }
        let total: usize = counts.iter().sum();
        let tv: f64 = counts
            .iter()
            .zip(&v)
            .map(|(&c, &pi)| (c as f64 / total as f64 - pi).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv <= 0.02, "total variation {tv}");
    }

    #[test]
    fn degenerate_beam_equals_greedy_generate() {
        let model = content_model(3, &[4], 8);
        let x = Sequence::empty();
        let cfg = DecodeConfig::default();
        for strategy in [l2r(), Strategy::LogLinear(make_preset("easy_first").unwrap())] {
            let beam = beam_search(&model, &strategy, &x, 4, &cfg).unwrap();
            let greedy = generate(&model, &strategy, &x, 4, &cfg, &mut PanicRng).unwrap();
            assert_eq!(beam.len(), 1);
            assert_eq!(beam[0].0, greedy);
        }
    }

    #[test]
    fn beam_scores_nonincreasing_and_wider_is_no_worse() {
        let model = content_model(3, &[4], 9);
        let x = Sequence::empty();
        let strategy = Strategy::LogLinear(make_preset("easy_first").unwrap());
        let run = |k| {
            let cfg = DecodeConfig { beam_k: k, beam_kp: 2, beam_kpp: 2, ..DecodeConfig::default() };
            beam_search(&model, &strategy, &x, 4, &cfg).unwrap()
        };
        let wide = run(4);
        for w in wide.windows(2) {
            assert!(w[0].1 >= w[1].1);
        }
        let narrow = run(1);
        assert!(wide[0].1 >= narrow[0].1);
    }

    #[test]
    fn full_frontier_beam_matches_brute_force() {
        let model = content_model(3, &[3], 10);
        let x = Sequence::empty();
        let oracle = brute_force_optimistic(&model, &x, 3, 3).unwrap();
        let cfg = DecodeConfig {
            beam_k: 729,
            beam_kp: 3,
            beam_kpp: 3,
            ..DecodeConfig::default()
        };
        let beam = beam_search(&model, &l2r(), &x, 3, &cfg).unwrap();
        let vocab = model.vocab();
        let beam_score = trace_score(&beam[0].0, vocab).unwrap();
        let oracle_score = trace_score(&oracle, vocab).unwrap();
        assert!((beam[0].1 - oracle_score.total).abs() < 1e-12);
        assert!((beam_score.total - oracle_score.total).abs() < 1e-12);
        assert_eq!(beam[0].0.final_sequence(), oracle.final_sequence());
    }

    #[test]
    fn brute_force_single_step_and_point_mass() {
        let model = content_model(4, &[1], 11);
        let vocab = model.vocab().clone();
        let content = vocab.content_ids();
        let x = Sequence::empty();
        let trace = brute_force_optimistic(&model, &x, 1, 1).unwrap();
        let row = model
            .conditional(&Sequence::from_ids(vec![vocab.mask_id()]), &[0], &x)
            .unwrap()
            .remove(0);
        let best = content
            .iter()
            .copied()
            .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap().then(b.cmp(&a)))
            .unwrap();
        assert_eq!(trace.final_sequence().ids(), &[best]);

        let vocab2 = bare_vocab(2);
        let a = vocab2.id_of("c0").unwrap();
        let b = vocab2.id_of("c1").unwrap();
        let target = Sequence::from_ids(vec![b, a]);
        let pm = TabularJointModel::point_mass(vocab2, &target).unwrap();
        for t in 2..4 {
            let trace = brute_force_optimistic(&pm, &x, 2, t).unwrap();
            assert_eq!(trace.final_sequence(), &target);
        }
    }

    #[test]
    fn brute_force_refuses_large_instances() {
        let model = content_model(4, &[4], 12);
        let x = Sequence::empty();
        assert!(matches!(
            brute_force_optimistic(&model, &x, 4, 12),
            Err(Error::TooLarge(_))
        ));
    }

    /// Second, independently structured enumerator: odometer over the flat
    /// path index instead of recursive descent.
    fn enumerate_optimistic_flat(
        model: &TabularJointModel,
        x: &Sequence,
        l: usize,
        t: usize,
    ) -> (f64, Vec<usize>) {
        let vocab = model.vocab();
        let content = vocab.content_ids();
        let nc = content.len();
        let mut best_score = f64::NEG_INFINITY;
        let mut best_final = Vec::new();
        // digits alternate (position choice, symbol choice) per step; the
        // position digit indexes the step's eligible list
        let mut digits = vec![0usize; 2 * t];
        'outer: loop {
            // evaluate this digit string
            let mut ids = vec![vocab.mask_id(); l];
            let mut filled = vec![false; l];
            let mut score = model.length_log_prob(x, l);
            let mut valid = true;
            for step in 0..t {
                let eligible: Vec<usize> = if filled.iter().all(|&f| f) {
                    (0..l).collect()
                } else {
                    (0..l).filter(|&i| !filled[i]).collect()
                };
                let pd = digits[2 * step];
                if pd >= eligible.len() {
                    valid = false;
                    break;
                }
                let pos = eligible[pd];
                let row = model
                    .conditional(&Sequence::from_ids(ids.clone()), &[pos], x)
                    .unwrap()
                    .remove(0);
                let total: f64 = content.iter().map(|&c| row[c]).sum();
                let tok = content[digits[2 * step + 1]];
                score += (row[tok] / total).max(PROB_FLOOR).ln();
                ids[pos] = tok;
                filled[pos] = true;
            }
            if valid && score > best_score {
                best_score = score;
                best_final = ids;
            }
            // odometer increment, least significant digit last
            for d in (0..2 * t).rev() {
                let base = if d % 2 == 0 { l } else { nc };
                digits[d] += 1;
                if digits[d] < base {
                    continue 'outer;
                }
                digits[d] = 0;
            }
            break;
        }
        (best_score, best_final)
    }

    #[test]
    fn brute_force_matches_independent_enumerator() {
        let model = content_model(3, &[3], 13);
        let x = Sequence::empty();
        let trace = brute_force_optimistic(&model, &x, 3, 3).unwrap();
        let score = trace_score(&trace, model.vocab()).unwrap();
        let (flat_score, flat_final) = enumerate_optimistic_flat(&model, &x, 3, 3);
        assert!((score.total - flat_score).abs() < 1e-12);
        assert_eq!(trace.final_sequence().ids(), flat_final.as_slice());
    }

    #[test]
    fn monte_carlo_m1_is_one_stochastic_run() {
        let model = content_model(3, &[4], 14);
        let x = Sequence::empty();
        let cfg = DecodeConfig::default();
        let mut rng1 = ChaCha8Rng::seed_from_u64(5);
        let (seq, _) = monte_carlo_decode(&model, &uniform(), &x, 4, 1, &cfg, &mut rng1).unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(5);
        let sample_cfg = DecodeConfig { symbol_choice: SymbolChoice::Sample, ..cfg };
        let trace = generate(&model, &uniform(), &x, 4, &sample_cfg, &mut rng2).unwrap();
        assert_eq!(&seq, trace.final_sequence());
    }

    #[test]
    fn monte_carlo_point_mass_and_sample_growth() {
        let vocab = bare_vocab(2);
        let a = vocab.id_of("c0").unwrap();
        let target = Sequence::from_ids(vec![a, a, a]);
        let pm = TabularJointModel::point_mass(vocab, &target).unwrap();
        let x = Sequence::empty();
        let cfg = DecodeConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for m in [1, 4, 16] {
            let (seq, _) = monte_carlo_decode(&pm, &uniform(), &x, 3, m, &cfg, &mut rng).unwrap();
            assert_eq!(seq, target);
        }

        // more samples can only help on average
        let model = content_model(3, &[3], 15);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mean_pll = |m: usize, rng: &mut ChaCha8Rng| {
            let reps = 60;
            let mut total = 0.0;
            for _ in 0..reps {
                let (_, pll) =
                    monte_carlo_decode(&model, &uniform(), &x, 3, m, &cfg, rng).unwrap();
                total += pll;
            }
            total / reps as f64
        };
        let small = mean_pll(1, &mut rng);
        let large = mean_pll(32, &mut rng);
        assert!(large >= small - 0.05, "m=32 mean {large} vs m=1 mean {small}");
    }

    #[test]
    fn length_candidate_decode_reports_and_picks() {
        use crate::models::{Corpus, CorpusPair};
        use crate::models::LengthDistribution;
        let model = content_model(2, &[2, 3, 4], 16);
        let x = Sequence::empty();
        let mut pairs = Vec::new();
        for (len, reps) in [(2usize, 5usize), (3, 60), (4, 35)] {
            for _ in 0..reps {
                pairs.push(CorpusPair { source: vec![], target: vec!["c0".into(); len] });
            }
        }
        let ldist = LengthDistribution::from_corpus(&Corpus { pairs }, 4).unwrap();

        let cfg = DecodeConfig { n_length_candidates: 1, ..DecodeConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let report =
            decode_with_length_candidates(&model, &ldist, &x, &l2r(), &cfg, None, &mut rng)
                .unwrap();
        assert_eq!(report.candidates.len(), 1);
        assert_eq!(report.chosen_length, 3);

        let cfg3 = DecodeConfig { n_length_candidates: 3, ..DecodeConfig::default() };
        let report3 =
            decode_with_length_candidates(&model, &ldist, &x, &l2r(), &cfg3, None, &mut rng)
                .unwrap();
        assert_eq!(report3.candidates.len(), 3);
        let best = report3
            .candidates
            .iter()
            .cloned()
            .reduce(|acc, c| {
                if c.rescore > acc.rescore || (c.rescore == acc.rescore && c.len < acc.len) {
                    c
                } else {
                    acc
                }
            })
            .unwrap();
        assert_eq!(report3.chosen, best.sequence);
        assert_eq!(report3.chosen_length, best.len);

        // ar rescoring without an ar model is a config error
        let bad = DecodeConfig { rescoring: Rescorer::ArModel, ..DecodeConfig::default() };
        assert!(
            decode_with_length_candidates(&model, &ldist, &x, &l2r(), &bad, None, &mut rng)
                .is_err()
        );
    }
}
