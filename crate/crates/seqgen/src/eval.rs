//! Metrics and analyses: corpus BLEU, exact match, pseudo-likelihood energy
//! and its evolution along a trace, generation-order vectors, and k-means
//! clustering of those vectors.

use std::io::Write;

use rand::Rng;

use crate::models::{pseudo_log_likelihood, MaskedConditionalModel};
use crate::nn::PROB_FLOOR;
use crate::seqcore::{GenerationTrace, Sequence};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// BLEU

/// Additive smoothing for zero n-gram counts; keeps short toy sentences off
/// the -inf cliff while staying bit-reproducible.
pub const BLEU_SMOOTHING_EPS: f64 = 0.01;

fn ngram_counts(ids: &[usize], n: usize) -> std::collections::HashMap<&[usize], usize> {
    let mut counts = std::collections::HashMap::new();
    if ids.len() >= n {
        for w in ids.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4 with brevity penalty, in [0, 100]. Zero n-gram
/// numerators take an additive epsilon of [`BLEU_SMOOTHING_EPS`]; a corpus
/// with no unigram overlap at all scores exactly 0.
pub fn bleu(candidates: &[Sequence], references: &[Sequence]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Config("bleu needs a nonempty corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Shape(format!(
            "{} candidates vs {} references",
            candidates.len(),
            references.len()
        )));
    }
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    for (c, r) in candidates.iter().zip(references) {
        cand_len += c.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(r.ids(), n);
            for (gram, count) in ngram_counts(c.ids(), n) {
                total[n - 1] += count;
                matched[n - 1] += count.min(rc.get(gram).copied().unwrap_or(0));
            }
        }
    }
    if matched[0] == 0 {
        return Ok(0.0);
    }
    let mut log_prec = 0.0;
    for n in 0..4 {
        if total[n] == 0 {
            // every candidate shorter than n+1 tokens: treat as a full match
            continue;
        }
        let num = if matched[n] == 0 { BLEU_SMOOTHING_EPS } else { matched[n] as f64 };
        log_prec += (num / total[n] as f64).ln() / 4.0;
    }
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len.max(1) as f64).exp()
    };
    Ok(100.0 * bp * log_prec.exp())
}

/// Fraction of candidates identical to their reference.
pub fn exact_match(candidates: &[Sequence], references: &[Sequence]) -> Result<f64> {
    if candidates.len() != references.len() || candidates.is_empty() {
        return Err(Error::Config("exact_match needs matched nonempty lists".into()));
    }
    let hits = candidates.iter().zip(references).filter(|(c, r)| c == r).count();
    Ok(hits as f64 / candidates.len() as f64)
}

// ---------------------------------------------------------------------------
// energy

/// Energy of a complete sequence: negative pseudo-log-likelihood.
pub fn energy<M: MaskedConditionalModel + ?Sized>(
    model: &M,
    y: &Sequence,
    x: &Sequence,
) -> Result<f64> {
    Ok(-pseudo_log_likelihood(model, y, x)?)
}

/// Energy of a possibly part-filled state, restricted to the filled
/// positions and normalized by their count; 0 with nothing filled yet.
fn partial_energy<M: MaskedConditionalModel + ?Sized>(
    model: &M,
    y: &Sequence,
    x: &Sequence,
    filled: &[usize],
) -> Result<f64> {
    if filled.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &i in filled {
        let row = model.conditional(y, &[i], x)?.remove(0);
        total -= row[y.get(i)].max(PROB_FLOOR).ln();
    }
    Ok(total / filled.len() as f64)
}

/// Per-symbol energy at every intermediate state Y^1..Y^{T+1} of a trace.
pub fn energy_curve<M: MaskedConditionalModel + ?Sized>(
    model: &M,
    trace: &GenerationTrace,
    x: &Sequence,
) -> Result<Vec<f64>> {
    let mut filled: Vec<usize> = Vec::new();
    let mut out = Vec::with_capacity(trace.intermediates.len());
    out.push(0.0); // all-mask start
    for (step, y) in trace.steps.iter().zip(&trace.intermediates[1..]) {
        for p in step.coords.positions() {
            if !filled.contains(&p) {
                filled.push(p);
            }
        }
        out.push(partial_energy(model, y, x, &filled)?);
    }
    Ok(out)
}

/// A mean curve over traces, resampled onto the 11-point step-fraction grid
/// 0, 0.1, …, 1 by nearest intermediate state, with standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveStat {
    pub fraction: Vec<f64>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

pub const CURVE_GRID: usize = 11;

fn resample(curve: &[f64]) -> Vec<f64> {
    (0..CURVE_GRID)
        .map(|j| {
            let frac = j as f64 / (CURVE_GRID - 1) as f64;
            let idx = (frac * (curve.len() - 1) as f64).round() as usize;
            curve[idx]
        })
        .collect()
}

pub fn mean_energy_curve<M: MaskedConditionalModel + ?Sized>(
    model: &M,
    runs: &[(Sequence, GenerationTrace)],
) -> Result<CurveStat> {
    if runs.is_empty() {
        return Err(Error::Config("need at least one trace".into()));
    }
    let sampled: Vec<Vec<f64>> = runs
        .iter()
        .map(|(x, trace)| Ok(resample(&energy_curve(model, trace, x)?)))
        .collect::<Result<_>>()?;
    let n = sampled.len() as f64;
    let mut mean = vec![0.0; CURVE_GRID];
    for row in &sampled {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let mut stderr = vec![0.0; CURVE_GRID];
    if sampled.len() > 1 {
        for row in &sampled {
            for ((s, v), m) in stderr.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for s in &mut stderr {
            *s = (*s / (n - 1.0)).sqrt() / n.sqrt();
        }
    }
    Ok(CurveStat {
        fraction: (0..CURVE_GRID).map(|j| j as f64 / (CURVE_GRID - 1) as f64).collect(),
        mean,
        stderr,
    })
}

/// Mean energy-gap curve per strategy: (uniform mean − strategy mean) at
/// each step fraction. Positive values mean the strategy sits below the
/// uniform baseline in energy.
pub fn energy_gap_curves<M: MaskedConditionalModel + ?Sized>(
    model: &M,
    uniform_runs: &[(Sequence, GenerationTrace)],
    strategy_runs: &[(String, Vec<(Sequence, GenerationTrace)>)],
) -> Result<Vec<(String, Vec<f64>)>> {
    let base = mean_energy_curve(model, uniform_runs)?;
    strategy_runs
        .iter()
        .map(|(name, runs)| {
            let curve = mean_energy_curve(model, runs)?;
            let gap = base.mean.iter().zip(&curve.mean).map(|(u, s)| u - s).collect();
            Ok((name.clone(), gap))
        })
        .collect()
}

pub fn write_energy_curves_csv<W: Write>(
    curves: &[(String, CurveStat)],
    w: &mut W,
) -> Result<()> {
    writeln!(w, "step_fraction,strategy,mean,stderr")?;
    for (name, stat) in curves {
        for ((f, m), s) in stat.fraction.iter().zip(&stat.mean).zip(&stat.stderr) {
            writeln!(w, "{f},{name},{m},{s}")?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// generation-order vectors

pub const ORDER_DIM: usize = 10;

/// The generation order of a linear-time trace as 10 normalized positions:
/// entry j is (1-indexed position selected at step ⌈jT/10⌉) / L.
pub fn order_vector(trace: &GenerationTrace) -> Result<[f64; ORDER_DIM]> {
    let t = trace.steps.len();
    if t == 0 {
        return Err(Error::InvalidTrace(vec!["empty trace".into()]));
    }
    let mut positions = Vec::with_capacity(t);
    for step in &trace.steps {
        let p = step.coords.positions();
        if p.len() != 1 {
            return Err(Error::InvalidTrace(vec![format!(
                "order vectors need single-position steps, found {}",
                p.len()
            )]));
        }
        positions.push(p[0]);
    }
    let l = trace.length as f64;
    let mut out = [0.0; ORDER_DIM];
    for (j, slot) in out.iter_mut().enumerate() {
        let step = ((j + 1) * t).div_ceil(ORDER_DIM);
        *slot = (positions[step - 1] + 1) as f64 / l;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// k-means

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterReport {
    pub centers: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centers: &[Vec<f64>], v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(center, v);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// One k-means++ seeded Lloyd run; returns the per-iteration inertia history
/// alongside the result so monotonicity is checkable.
fn lloyd<R: Rng + ?Sized>(
    vectors: &[Vec<f64>],
    k: usize,
    rng: &mut R,
) -> (Vec<Vec<f64>>, Vec<usize>, Vec<f64>) {
    // k-means++ seeding
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(vectors[rng.gen_range(0..vectors.len())].clone());
    while centers.len() < k {
        let d2: Vec<f64> = vectors.iter().map(|v| nearest(&centers, v).1).collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let u: f64 = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut idx = vectors.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if u < acc {
                    idx = i;
                    break;
                }
            }
            idx
        } else {
            rng.gen_range(0..vectors.len())
        };
        centers.push(vectors[pick].clone());
    }

    let dim = vectors[0].len();
    let mut assignments = vec![0usize; vectors.len()];
    let mut history = Vec::new();
    for _ in 0..100 {
        let mut inertia = 0.0;
        for (i, v) in vectors.iter().enumerate() {
            let (c, d) = nearest(&centers, v);
            assignments[i] = c;
            inertia += d;
        }
        if history.last().is_some_and(|&prev: &f64| (prev - inertia).abs() < 1e-15) {
            history.push(inertia);
            break;
        }
        history.push(inertia);
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (v, &a) in vectors.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(v) {
                *s += x;
            }
        }
        for (c, (sum, &count)) in centers.iter_mut().zip(sums.iter().zip(&counts)) {
            if count > 0 {
                *c = sum.iter().map(|s| s / count as f64).collect();
            }
        }
    }
    (centers, assignments, history)
}

/// k-means with k-means++ seeding and 10 restarts, keeping the lowest
/// inertia. Deterministic under a fixed seed.
pub fn kmeans_cluster<R: Rng + ?Sized>(
    vectors: &[Vec<f64>],
    k: usize,
    rng: &mut R,
) -> Result<ClusterReport> {
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    if vectors.len() < k {
        return Err(Error::Config(format!(
            "{} vectors cannot fill {k} clusters",
            vectors.len()
        )));
    }
    let mut best: Option<(Vec<Vec<f64>>, Vec<usize>, f64)> = None;
    for _ in 0..10 {
        let (centers, assignments, history) = lloyd(vectors, k, rng);
        let inertia = *history.last().expect("at least one iteration");
        debug_assert!(
            history.windows(2).all(|w| w[1] <= w[0] + 1e-12),
            "inertia must not increase"
        );
        if best.as_ref().map_or(true, |(_, _, b)| inertia < *b) {
            best = Some((centers, assignments, inertia));
        }
    }
    let (centers, assignments, inertia) = best.expect("ten restarts ran");
    let mut counts = vec![0usize; k];
    for &a in &assignments {
        counts[a] += 1;
    }
    Ok(ClusterReport { centers, counts, assignments, inertia })
}

pub fn write_cluster_csv<W: Write>(report: &ClusterReport, w: &mut W) -> Result<()> {
    write!(w, "cluster,count")?;
    let dim = report.centers.first().map_or(0, |c| c.len());
    for d in 0..dim {
        write!(w, ",c{d}")?;
    }
    writeln!(w)?;
    for (k, (center, count)) in report.centers.iter().zip(&report.counts).enumerate() {
        write!(w, "{k},{count}")?;
        for v in center {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}
