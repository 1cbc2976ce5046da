//! Empirical length model `p(L | source length)`, estimated from corpus
//! counts with add-one smoothing so no length is impossible at decode time.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::Corpus;
use crate::seqcore::Sequence;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthDistribution {
    /// source length -> (target length -> count)
    counts: BTreeMap<usize, BTreeMap<usize, u64>>,
    max_target_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LengthCandidate {
    pub len: usize,
    pub log_prob: f64,
}

impl LengthDistribution {
    pub fn from_corpus(corpus: &Corpus, max_target_len: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Corpus("cannot estimate lengths from an empty corpus".into()));
        }
        let mut counts: BTreeMap<usize, BTreeMap<usize, u64>> = BTreeMap::new();
        for p in &corpus.pairs {
            if p.target.is_empty() || p.target.len() > max_target_len {
                return Err(Error::Corpus(format!(
                    "target length {} outside 1..={max_target_len}",
                    p.target.len()
                )));
            }
            *counts.entry(p.source.len()).or_default().entry(p.target.len()).or_insert(0) += 1;
        }
        Ok(Self { counts, max_target_len })
    }

    pub fn from_counts(counts: BTreeMap<usize, BTreeMap<usize, u64>>, max_target_len: usize) -> Self {
        Self { counts, max_target_len }
    }

    pub fn max_target_len(&self) -> usize {
        self.max_target_len
    }

    /// Add-one smoothed `p(L | source length)` over 1..=max_target_len.
    pub fn prob(&self, source_len: usize, target_len: usize) -> f64 {
        if target_len == 0 || target_len > self.max_target_len {
            return 0.0;
        }
        let row = self.counts.get(&source_len);
        let count = row.and_then(|r| r.get(&target_len)).copied().unwrap_or(0);
        let total: u64 = row.map(|r| r.values().sum()).unwrap_or(0);
        (count as f64 + 1.0) / (total as f64 + self.max_target_len as f64)
    }

    pub fn log_prob(&self, source_len: usize, target_len: usize) -> f64 {
        self.prob(source_len, target_len).max(f64::MIN_POSITIVE).ln()
    }

    /// Text table export: `source_len target_len count` per line.
    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "# max_target_len {}", self.max_target_len)?;
        for (&src, row) in &self.counts {
            for (&tgt, &count) in row {
                writeln!(w, "{src} {tgt} {count}")?;
            }
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut counts: BTreeMap<usize, BTreeMap<usize, u64>> = BTreeMap::new();
        let mut max_target_len = 0usize;
        for line in r.lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# max_target_len") {
                max_target_len = rest
                    .trim()
                    .parse()
                    .map_err(|_| Error::Corpus("bad max_target_len header".into()))?;
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(Error::Corpus(format!("bad length-table line: {line:?}")));
            }
            let src: usize = fields[0].parse().map_err(|_| Error::Corpus("bad src len".into()))?;
            let tgt: usize = fields[1].parse().map_err(|_| Error::Corpus("bad tgt len".into()))?;
            let n: u64 = fields[2].parse().map_err(|_| Error::Corpus("bad count".into()))?;
            *counts.entry(src).or_default().entry(tgt).or_insert(0) += n;
        }
        if max_target_len == 0 {
            return Err(Error::Corpus("length table missing max_target_len header".into()));
        }
        Ok(Self { counts, max_target_len })
    }
}

/// The `n` most probable target lengths for input `x`, descending by
/// probability with ties broken toward the shorter length. Returns the whole
/// support when `n` exceeds it.
pub fn length_candidates(
    ldist: &LengthDistribution,
    x: &Sequence,
    n: usize,
) -> Result<Vec<LengthCandidate>> {
    if n == 0 {
        return Err(Error::Config("need at least one length candidate".into()));
    }
    let src_len = x.len();
    let mut all: Vec<LengthCandidate> = (1..=ldist.max_target_len)
        .map(|len| LengthCandidate { len, log_prob: ldist.log_prob(src_len, len) })
        .collect();
    all.sort_by(|a, b| {
        b.log_prob
            .partial_cmp(&a.log_prob)
            .unwrap()
            .then_with(|| a.len.cmp(&b.len))
    });
    all.truncate(n);
    Ok(all)
}
