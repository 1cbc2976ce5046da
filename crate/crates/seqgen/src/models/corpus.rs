//! Parallel corpus IO: one pair per line, source and target separated by a
//! tab, tokens separated by single spaces.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::seqcore::{Sequence, Vocabulary};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusPair {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub pairs: Vec<CorpusPair>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (src, tgt) = line
                .split_once('\t')
                .ok_or_else(|| Error::Corpus(format!("line {}: missing tab", lineno + 1)))?;
            pairs.push(CorpusPair {
                source: src.split(' ').filter(|t| !t.is_empty()).map(String::from).collect(),
                target: tgt.split(' ').filter(|t| !t.is_empty()).map(String::from).collect(),
            });
        }
        Ok(Self { pairs })
    }

    pub fn read_path(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(f))
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        for p in &self.pairs {
            writeln!(w, "{}\t{}", p.source.join(" "), p.target.join(" "))?;
        }
        Ok(())
    }

    pub fn write_path(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.write(&mut f)
    }

    /// Token-id view of a pair; unknown tokens are an error.
    pub fn pair_ids(&self, idx: usize, vocab: &Vocabulary) -> Result<(Sequence, Sequence)> {
        let p = &self.pairs[idx];
        let lookup = |toks: &[String]| -> Result<Vec<usize>> {
            toks.iter()
                .map(|t| {
                    vocab
                        .id_of(t)
                        .ok_or_else(|| Error::Corpus(format!("unknown token {t:?}")))
                })
                .collect()
        };
        Ok((
            Sequence::from_ids(lookup(&p.source)?),
            Sequence::from_ids(lookup(&p.target)?),
        ))
    }

    /// All distinct tokens, sorted, for vocabulary construction.
    pub fn token_inventory(&self) -> Vec<String> {
        let mut set = std::collections::BTreeSet::new();
        for p in &self.pairs {
            set.extend(p.source.iter().cloned());
            set.extend(p.target.iter().cloned());
        }
        set.into_iter().collect()
    }
}
