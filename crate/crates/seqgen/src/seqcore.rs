//! Core sequence, coordinate, and generation-trace types.
//!
//! A generation trace records the full process: the all-mask start state, one
//! [`GenerationStep`] per iteration (which positions were selected and what was
//! written there, with log-probabilities), and the resulting intermediate
//! sequences. Everything here is an immutable value; operations are pure.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Token vocabulary with the special symbols used by the generation machinery.
///
/// `mask_id` marks unfilled positions, `pad_id` is reserved for batching.
/// Models may designate further special tokens (separator, end marker) via
/// [`Vocabulary::is_special`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    mask_id: usize,
    pad_id: usize,
    /// Ids that must never appear in a finished target sequence.
    special: Vec<usize>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, mask_id: usize, pad_id: usize) -> Result<Self> {
        if mask_id >= tokens.len() || pad_id >= tokens.len() {
            return Err(Error::Config("mask/pad id out of range".into()));
        }
        if mask_id == pad_id {
            return Err(Error::Config("mask_id must differ from pad_id".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &tokens {
            if !seen.insert(t.as_str()) {
                return Err(Error::Config(format!("duplicate token {t:?}")));
            }
        }
        let special = vec![pad_id, mask_id];
        Ok(Self { tokens, mask_id, pad_id, special })
    }

    /// Builds `[<pad>, <mask>, <sep>, <eos>, content...]`.
    pub fn with_specials(content: &[String]) -> Result<Self> {
        let mut tokens = vec![
            "<pad>".to_string(),
            "<mask>".to_string(),
            "<sep>".to_string(),
            "<eos>".to_string(),
        ];
        tokens.extend(content.iter().cloned());
        let mut v = Self::new(tokens, 1, 0)?;
        v.special = vec![0, 1, 2, 3];
        Ok(v)
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn mask_id(&self) -> usize {
        self.mask_id
    }

    pub fn pad_id(&self) -> usize {
        self.pad_id
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    pub fn sep_id(&self) -> Option<usize> {
        self.id_of("<sep>")
    }

    pub fn eos_id(&self) -> Option<usize> {
        self.id_of("<eos>")
    }

    pub fn is_special(&self, id: usize) -> bool {
        self.special.contains(&id)
    }

    /// Ids that symbol replacement may write.
    pub fn content_ids(&self) -> Vec<usize> {
        (0..self.size()).filter(|i| !self.is_special(*i)).collect()
    }
}

/// A fixed-length token sequence. Length is decided up front by the length
/// model; there is no end-of-sequence token inside the undirected target.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sequence {
    ids: Vec<usize>,
}

impl Sequence {
    pub fn new(ids: Vec<usize>, vocab: &Vocabulary) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::InvalidLength("sequence must be nonempty".into()));
        }
        for &id in &ids {
            if id >= vocab.size() {
                return Err(Error::Config(format!("token id {id} out of range")));
            }
        }
        Ok(Self { ids })
    }

    /// Unchecked constructor for sequences whose ids are known valid.
    pub fn from_ids(ids: Vec<usize>) -> Self {
        Self { ids }
    }

    /// The empty input X for unconditional generation.
    pub fn empty() -> Self {
        Self { ids: vec![] }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn get(&self, i: usize) -> usize {
        self.ids[i]
    }

    pub fn contains_mask(&self, vocab: &Vocabulary) -> bool {
        self.ids.iter().any(|&id| id == vocab.mask_id())
    }

    pub fn render(&self, vocab: &Vocabulary) -> String {
        self.ids
            .iter()
            .map(|&id| vocab.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// The per-step coordinate sequence: bit i is 1 iff position i is replaced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoordinateMask {
    bits: Vec<u8>,
}

impl CoordinateMask {
    pub fn zeros(len: usize) -> Self {
        Self { bits: vec![0; len] }
    }

    pub fn from_positions(len: usize, positions: &[usize]) -> Result<Self> {
        let mut bits = vec![0u8; len];
        for &p in positions {
            if p >= len {
                return Err(Error::PositionOutOfRange(p, len));
            }
            bits[p] = 1;
        }
        Ok(Self { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bit(&self, i: usize) -> bool {
        self.bits[i] == 1
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn positions(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 1)
            .map(|(i, _)| i)
            .collect()
    }
}

/// One factor of the generation product: the selected coordinates, the
/// replacement symbols, and the two log-probability contributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStep {
    pub coords: CoordinateMask,
    /// position -> new token id, keyed exactly by the set bits of `coords`.
    pub replacements: BTreeMap<usize, usize>,
    pub coord_log_prob: f64,
    pub symbol_log_prob: f64,
}

impl GenerationStep {
    pub fn new(
        coords: CoordinateMask,
        replacements: BTreeMap<usize, usize>,
        coord_log_prob: f64,
        symbol_log_prob: f64,
    ) -> Result<Self> {
        let flagged: Vec<usize> = coords.positions();
        let keys: Vec<usize> = replacements.keys().copied().collect();
        if flagged != keys {
            return Err(Error::InconsistentStep(format!(
                "replacement keys {keys:?} do not match flagged positions {flagged:?}"
            )));
        }
        if coord_log_prob > 0.0 || symbol_log_prob > 0.0 {
            return Err(Error::InconsistentStep("log-probs must be <= 0".into()));
        }
        Ok(Self { coords, replacements, coord_log_prob, symbol_log_prob })
    }
}

/// The full generation record G: input X, chosen length, and the ordered
/// steps with all intermediate sequences.
///
/// Intermediates are stored redundantly next to the steps so analysis tooling
/// can read them without replaying; `validate` cross-checks the two.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub input: Sequence,
    pub length: usize,
    pub length_log_prob: f64,
    pub steps: Vec<GenerationStep>,
    /// Y^1 .. Y^{T+1}; Y^1 is all-mask.
    pub intermediates: Vec<Sequence>,
}

impl GenerationTrace {
    pub fn new(input: Sequence, length: usize, length_log_prob: f64) -> Self {
        GenerationTrace {
            input,
            length,
            length_log_prob,
            steps: vec![],
            intermediates: vec![],
        }
    }

    pub fn final_sequence(&self) -> &Sequence {
        self.intermediates.last().expect("trace has at least Y^1")
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }
}

/// Decomposed trace score: `total = length_term + coord_term + symbol_term`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceScore {
    pub length_term: f64,
    pub coord_term: f64,
    pub symbol_term: f64,
    pub total: f64,
}

/// Returns the all-mask start state `(Y^1, Z^1)`.
pub fn init_state(len: usize, vocab: &Vocabulary) -> Result<(Sequence, CoordinateMask)> {
    if len == 0 {
        return Err(Error::InvalidLength("length must be >= 1".into()));
    }
    let y = Sequence::from_ids(vec![vocab.mask_id(); len]);
    Ok((y, CoordinateMask::zeros(len)))
}

/// Applies one step: flagged positions take their replacement, the rest keep
/// the prior symbol.
pub fn apply_step(y: &Sequence, step: &GenerationStep) -> Result<Sequence> {
    if step.coords.len() != y.len() {
        return Err(Error::Shape(format!(
            "coordinate mask length {} vs sequence length {}",
            step.coords.len(),
            y.len()
        )));
    }
    for &p in step.replacements.keys() {
        if !step.coords.bit(p) {
            return Err(Error::InconsistentStep(format!(
                "replacement at unflagged position {p}"
            )));
        }
    }
    let mut ids = y.ids().to_vec();
    for (&p, &tok) in &step.replacements {
        ids[p] = tok;
    }
    Ok(Sequence::from_ids(ids))
}

/// Sums the stored log-probability fields of a validated trace. Pure
/// summation; no model calls.
pub fn trace_score(trace: &GenerationTrace, vocab: &Vocabulary) -> Result<TraceScore> {
    let violations = validate_trace(trace, vocab);
    if !violations.is_empty() {
        return Err(Error::InvalidTrace(violations));
    }
    let coord_term: f64 = trace.steps.iter().map(|s| s.coord_log_prob).sum();
    let symbol_term: f64 = trace.steps.iter().map(|s| s.symbol_log_prob).sum();
    Ok(TraceScore {
        length_term: trace.length_log_prob,
        coord_term,
        symbol_term,
        total: trace.length_log_prob + coord_term + symbol_term,
    })
}

/// Checks every trace invariant and returns all violations found.
pub fn validate_trace(trace: &GenerationTrace, vocab: &Vocabulary) -> Vec<String> {
    let mut out = Vec::new();
    if trace.length == 0 {
        out.push("length must be >= 1".into());
        return out;
    }
    if trace.intermediates.len() != trace.steps.len() + 1 {
        out.push(format!(
            "expected {} intermediates for {} steps, found {}",
            trace.steps.len() + 1,
            trace.steps.len(),
            trace.intermediates.len()
        ));
        return out;
    }
    let y1 = &trace.intermediates[0];
    if y1.len() != trace.length {
        out.push("initial sequence length mismatch".into());
    }
    if y1.ids().iter().any(|&id| id != vocab.mask_id()) {
        out.push("initial sequence not empty".into());
    }
    for (t, step) in trace.steps.iter().enumerate() {
        if step.coords.len() != trace.length {
            out.push(format!("step {t}: coordinate mask length mismatch"));
            continue;
        }
        let flagged = step.coords.positions();
        let keys: Vec<usize> = step.replacements.keys().copied().collect();
        if flagged != keys {
            out.push(format!("step {t}: replacement at unflagged position"));
            continue;
        }
        if step.coord_log_prob > 0.0 || step.symbol_log_prob > 0.0 {
            out.push(format!("step {t}: positive log-probability"));
        }
        match apply_step(&trace.intermediates[t], step) {
            Ok(next) => {
                if next != trace.intermediates[t + 1] {
                    out.push(format!("step {t}: stored intermediate does not match replay"));
                }
            }
            Err(e) => out.push(format!("step {t}: {e}")),
        }
    }
    // Final sequence must be mask-free once every position was selected.
    let mut touched = vec![false; trace.length];
    for step in &trace.steps {
        for p in step.coords.positions() {
            touched[p] = true;
        }
    }
    if touched.iter().all(|&t| t) {
        if let Some(last) = trace.intermediates.last() {
            if last.contains_mask(vocab) {
                out.push("final sequence contains mask after full coverage".into());
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Trace export: line-delimited JSON, one header record then one record per step.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TraceHeader {
    pub input: Vec<String>,
    #[serde(rename = "L")]
    pub length: usize,
    pub length_log_prob: f64,
    pub strategy: String,
    pub config: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TraceStepRecord {
    pub t: usize,
    pub positions: Vec<usize>,
    pub old_symbols: Vec<String>,
    pub new_symbols: Vec<String>,
    pub coord_log_prob: f64,
    pub symbol_log_prob: f64,
}

pub fn write_trace<W: Write>(
    w: &mut W,
    trace: &GenerationTrace,
    vocab: &Vocabulary,
    strategy: &str,
    config: &str,
) -> Result<()> {
    let header = TraceHeader {
        input: trace.input.ids().iter().map(|&i| vocab.token(i).to_string()).collect(),
        length: trace.length,
        length_log_prob: trace.length_log_prob,
        strategy: strategy.to_string(),
        config: config.to_string(),
    };
    writeln!(w, "{}", serde_json::to_string(&header).map_err(io_err)?)?;
    for (t, step) in trace.steps.iter().enumerate() {
        let positions = step.coords.positions();
        let prev = &trace.intermediates[t];
        let rec = TraceStepRecord {
            t: t + 1,
            old_symbols: positions.iter().map(|&p| vocab.token(prev.get(p)).to_string()).collect(),
            new_symbols: positions
                .iter()
                .map(|&p| vocab.token(step.replacements[&p]).to_string())
                .collect(),
            positions,
            coord_log_prob: step.coord_log_prob,
            symbol_log_prob: step.symbol_log_prob,
        };
        writeln!(w, "{}", serde_json::to_string(&rec).map_err(io_err)?)?;
    }
    Ok(())
}

pub fn read_trace<R: BufRead>(r: &mut R) -> Result<(TraceHeader, Vec<TraceStepRecord>)> {
    let mut lines = r.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Io(std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "empty trace file")))??;
    let header: TraceHeader = serde_json::from_str(&header_line).map_err(io_err)?;
    let mut steps = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        steps.push(serde_json::from_str(&line).map_err(io_err)?);
    }
    Ok((header, steps))
}

fn io_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
}
