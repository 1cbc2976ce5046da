//! Explicit joint-table model over a tiny vocabulary. Conditionals are
//! computed by enumerating the joint, which makes this the exact oracle the
//! decoders are verified against.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::MaskedConditionalModel;
use crate::seqcore::{Sequence, Vocabulary};
use crate::{Error, Result};

/// `p(Y | X, L)` as an explicit table per supported input and length, plus
/// `p(L | X)`. Intended for |V| <= 5 and L <= 4.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TabularJointModel {
    vocab: Vocabulary,
    max_len: usize,
    /// input ids -> (length -> flat joint of size |V|^L, lexicographic by ids)
    joints: HashMap<Vec<usize>, HashMap<usize, Vec<f64>>>,
    /// input ids -> log p(L|X) indexed by L (index 0 unused)
    length_log_probs: HashMap<Vec<usize>, Vec<f64>>,
}

impl TabularJointModel {
    pub fn new(
        vocab: Vocabulary,
        max_len: usize,
        joints: HashMap<Vec<usize>, HashMap<usize, Vec<f64>>>,
        length_probs: HashMap<Vec<usize>, Vec<f64>>,
    ) -> Result<Self> {
        let size = vocab.size();
        for table in joints.values() {
            for (&len, joint) in table {
                if len == 0 || len > max_len {
                    return Err(Error::Config(format!("tabular joint length {len} out of range")));
                }
                let expect = size.pow(len as u32);
                if joint.len() != expect {
                    return Err(Error::Config(format!(
                        "joint for L={len} must have {expect} entries, got {}",
                        joint.len()
                    )));
                }
                if joint.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                    return Err(Error::Config("joint entries must be finite and >= 0".into()));
                }
                let total: f64 = joint.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(format!("joint for L={len} sums to {total}")));
                }
            }
        }
        let length_log_probs = length_probs
            .into_iter()
            .map(|(x, probs)| {
                let logs = probs.iter().map(|&p| p.max(f64::MIN_POSITIVE).ln()).collect();
                (x, logs)
            })
            .collect();
        Ok(Self { vocab, max_len, joints, length_log_probs })
    }

    /// Random joint with full support over content tokens only (specials get
    /// zero mass), a single empty input, and uniform length probabilities.
    pub fn random_content<R: Rng>(
        vocab: Vocabulary,
        lengths: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        Self::random_impl(vocab, lengths, rng, true)
    }

    /// Random joint with full support over the whole vocabulary, mask token
    /// included.
    pub fn random_full<R: Rng>(vocab: Vocabulary, lengths: &[usize], rng: &mut R) -> Result<Self> {
        Self::random_impl(vocab, lengths, rng, false)
    }

    fn random_impl<R: Rng>(
        vocab: Vocabulary,
        lengths: &[usize],
        rng: &mut R,
        content_only: bool,
    ) -> Result<Self> {
        let size = vocab.size();
        let max_len = *lengths.iter().max().expect("at least one length");
        let mut table = HashMap::new();
        for &len in lengths {
            let n = size.pow(len as u32);
            let mut joint = vec![0.0f64; n];
            for (idx, slot) in joint.iter_mut().enumerate() {
                if content_only {
                    let ids = unflatten(idx, size, len);
                    if ids.iter().any(|&id| vocab.is_special(id)) {
                        continue;
                    }
                }
                *slot = rng.gen_range(0.01..1.0);
            }
            let total: f64 = joint.iter().sum();
            joint.iter_mut().for_each(|p| *p /= total);
            table.insert(len, joint);
        }
        let uniform = 1.0 / lengths.len() as f64;
        let mut length_probs = vec![0.0; max_len + 1];
        for &len in lengths {
            length_probs[len] = uniform;
        }
        Self::new(
            vocab,
            max_len,
            HashMap::from([(vec![], table)]),
            HashMap::from([(vec![], length_probs)]),
        )
    }

    /// Point mass on a single sequence (with the matching length certain).
    pub fn point_mass(vocab: Vocabulary, target: &Sequence) -> Result<Self> {
        let size = vocab.size();
        let len = target.len();
        let mut joint = vec![0.0; size.pow(len as u32)];
        joint[flatten(target.ids(), size)] = 1.0;
        let mut length_probs = vec![0.0; len + 1];
        length_probs[len] = 1.0;
        Self::new(
            vocab,
            len,
            HashMap::from([(vec![], HashMap::from([(len, joint)]))]),
            HashMap::from([(vec![], length_probs)]),
        )
    }

    /// Uniform over all content-token sequences of each length.
    pub fn uniform_content(vocab: Vocabulary, lengths: &[usize]) -> Result<Self> {
        let size = vocab.size();
        let max_len = *lengths.iter().max().expect("at least one length");
        let mut table = HashMap::new();
        for &len in lengths {
            let n = size.pow(len as u32);
            let mut joint = vec![0.0f64; n];
            let mut support = 0usize;
            for (idx, slot) in joint.iter_mut().enumerate() {
                let ids = unflatten(idx, size, len);
                if ids.iter().all(|&id| !vocab.is_special(id)) {
                    *slot = 1.0;
                    support += 1;
                }
            }
            joint.iter_mut().for_each(|p| *p /= support as f64);
            table.insert(len, joint);
        }
        let uniform = 1.0 / lengths.len() as f64;
        let mut length_probs = vec![0.0; max_len + 1];
        for &len in lengths {
            length_probs[len] = uniform;
        }
        Self::new(
            vocab,
            max_len,
            HashMap::from([(vec![], table)]),
            HashMap::from([(vec![], length_probs)]),
        )
    }

    pub fn joint(&self, x: &Sequence, len: usize) -> Result<&[f64]> {
        self.joints
            .get(x.ids())
            .and_then(|t| t.get(&len))
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Model(format!("no joint table for input {:?}, L={len}", x.ids())))
    }

    pub fn joint_prob(&self, x: &Sequence, y: &Sequence) -> Result<f64> {
        let joint = self.joint(x, y.len())?;
        Ok(joint[flatten(y.ids(), self.vocab.size())])
    }

    pub fn supported_lengths(&self, x: &Sequence) -> Vec<usize> {
        self.joints
            .get(x.ids())
            .map(|t| {
                let mut lens: Vec<usize> = t.keys().copied().collect();
                lens.sort_unstable();
                lens
            })
            .unwrap_or_default()
    }
}

impl MaskedConditionalModel for TabularJointModel {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn max_length(&self) -> usize {
        self.max_len
    }

    fn supports_exact(&self) -> bool {
        true
    }

    fn conditional(&self, y: &Sequence, masked: &[usize], x: &Sequence) -> Result<Vec<Vec<f64>>> {
        if masked.is_empty() {
            return Err(Error::Model("conditional requires at least one masked position".into()));
        }
        let len = y.len();
        for &p in masked {
            if p >= len {
                return Err(Error::PositionOutOfRange(p, len));
            }
        }
        let size = self.vocab.size();
        let joint = self.joint(x, len)?;

        // Observed positions are those neither queried nor currently holding a
        // mask; everything else is marginalized over the full vocabulary.
        let mut observed: Vec<Option<usize>> = (0..len)
            .map(|i| {
                if masked.contains(&i) || y.get(i) == self.vocab.mask_id() {
                    None
                } else {
                    Some(y.get(i))
                }
            })
            .collect();
        for &q in masked {
            observed[q] = None;
        }
        let free: Vec<usize> =
            (0..len).filter(|i| observed[*i].is_none()).collect();

        let mut rows = vec![vec![0.0f64; size]; masked.len()];
        let mut assignment = vec![0usize; len];
        for (i, obs) in observed.iter().enumerate() {
            if let Some(v) = obs {
                assignment[i] = *v;
            }
        }
        let mut counters = vec![0usize; free.len()];
        loop {
            for (slot, &pos) in counters.iter().zip(&free) {
                assignment[pos] = *slot;
            }
            let p = joint[flatten(&assignment, size)];
            if p > 0.0 {
                for (row, &q) in rows.iter_mut().zip(masked) {
                    row[assignment[q]] += p;
                }
            }
            // odometer increment over free positions
            let mut carry = true;
            for slot in counters.iter_mut() {
                *slot += 1;
                if *slot < size {
                    carry = false;
                    break;
                }
                *slot = 0;
            }
            if carry {
                break;
            }
        }

        for row in &mut rows {
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.iter_mut().for_each(|p| *p /= total);
            } else {
                row.iter_mut().for_each(|p| *p = 1.0 / size as f64);
            }
        }
        Ok(rows)
    }

    fn length_log_prob(&self, x: &Sequence, len: usize) -> f64 {
        self.length_log_probs
            .get(x.ids())
            .and_then(|v| v.get(len))
            .copied()
            .unwrap_or(f64::MIN_POSITIVE.ln())
    }
}

/// Exhaustive `argmax_Y p(Y | X, L)`; ties break lexicographically by ids.
pub fn tabular_exact_map(model: &TabularJointModel, x: &Sequence, len: usize) -> Result<Sequence> {
    let joint = model.joint(x, len)?;
    let size = model.vocab().size();
    let mut best_idx = 0usize;
    let mut best_p = f64::NEG_INFINITY;
    for (idx, &p) in joint.iter().enumerate() {
        if p > best_p {
            best_p = p;
            best_idx = idx;
        }
    }
    Ok(Sequence::from_ids(unflatten(best_idx, size, len)))
}

pub(crate) fn flatten(ids: &[usize], size: usize) -> usize {
    ids.iter().fold(0, |acc, &id| acc * size + id)
}

pub(crate) fn unflatten(mut idx: usize, size: usize, len: usize) -> Vec<usize> {
    let mut out = vec![0usize; len];
    for slot in out.iter_mut().rev() {
        *slot = idx % size;
        idx /= size;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::pseudo_log_likelihood;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_vocab(content: &[&str]) -> Vocabulary {
        let toks: Vec<String> = content.iter().map(|s| s.to_string()).collect();
        Vocabulary::with_specials(&toks).unwrap()
    }

    /// Vocab with exactly 2 content tokens plus specials is too big for
    /// |V|<=5, so oracle tests use a bare vocabulary: mask=0, pad handled as
    /// a second special, content c0..c{n-1}.
    fn bare_vocab(n_content: usize) -> Vocabulary {
        let mut toks = vec!["<pad>".to_string(), "<mask>".to_string()];
        toks.extend((0..n_content).map(|i| format!("c{i}")));
        Vocabulary::new(toks, 1, 0).unwrap()
    }

    #[test]
    fn conditional_normalizes_joint_over_masked_position() {
        let v = bare_vocab(2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = TabularJointModel::random_content(v.clone(), &[2], &mut rng).unwrap();
        let c0 = v.id_of("c0").unwrap();
        let c1 = v.id_of("c1").unwrap();
        // Y = [mask, c1], query position 0
        let y = Sequence::from_ids(vec![v.mask_id(), c1]);
        let rows = m.conditional(&y, &[0], &Sequence::empty()).unwrap();
        // direct enumeration over y_0 with y_1 = c1
        let joint = m.joint(&Sequence::empty(), 2).unwrap();
        let size = v.size();
        let p = |a: usize, b: usize| joint[flatten(&[a, b], size)];
        let denom: f64 = (0..size).map(|a| p(a, c1)).sum();
        assert!((rows[0][c0] - p(c0, c1) / denom).abs() < 1e-12);
        assert!((rows[0][c1] - p(c1, c1) / denom).abs() < 1e-12);
        let s: f64 = rows[0].iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn uniform_joint_gives_uniform_conditionals() {
        let v = bare_vocab(3);
        let m = TabularJointModel::uniform_content(v.clone(), &[3]).unwrap();
        let c: Vec<usize> = v.content_ids();
        let y = Sequence::from_ids(vec![c[0], v.mask_id(), c[2]]);
        let rows = m.conditional(&y, &[1], &Sequence::empty()).unwrap();
        for &id in &c {
            assert!((rows[0][id] - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conditional_equals_marginalization_exhaustively() {
        // oracle consistency sweep: L=3, |V|=3 content
        let v = bare_vocab(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = TabularJointModel::random_content(v.clone(), &[3], &mut rng).unwrap();
        let size = v.size();
        let joint = m.joint(&Sequence::empty(), 3).unwrap().to_vec();
        let content = v.content_ids();
        for &a in &content {
            for &b in &content {
                for pos in 0..3usize {
                    // Y observed at the two non-queried positions
                    let mut ids = vec![0usize; 3];
                    let others: Vec<usize> = (0..3).filter(|&i| i != pos).collect();
                    ids[others[0]] = a;
                    ids[others[1]] = b;
                    ids[pos] = v.mask_id();
                    let y = Sequence::from_ids(ids.clone());
                    let rows = m.conditional(&y, &[pos], &Sequence::empty()).unwrap();
                    for val in 0..size {
                        let mut num = 0.0;
                        let mut den = 0.0;
                        for idx in 0..joint.len() {
                            let cand = unflatten(idx, size, 3);
                            if cand[others[0]] == a && cand[others[1]] == b {
                                den += joint[idx];
                                if cand[pos] == val {
                                    num += joint[idx];
                                }
                            }
                        }
                        let expect = if den > 0.0 { num / den } else { 1.0 / size as f64 };
                        assert!(
                            (rows[0][val] - expect).abs() < 1e-12,
                            "pos {pos} val {val}: {} vs {expect}",
                            rows[0][val]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn masking_really_masks() {
        let v = bare_vocab(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = TabularJointModel::random_content(v.clone(), &[3], &mut rng).unwrap();
        let c = v.content_ids();
        let y1 = Sequence::from_ids(vec![c[0], c[1], c[2]]);
        let y2 = Sequence::from_ids(vec![c[0], c[0], c[2]]); // differs at queried pos
        let r1 = m.conditional(&y1, &[1], &Sequence::empty()).unwrap();
        let r2 = m.conditional(&y2, &[1], &Sequence::empty()).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn pseudo_ll_uniform_model_analytic() {
        // uniform over 4 content tokens: pseudo-LL = -L ln 4
        let v = bare_vocab(4);
        let m = TabularJointModel::uniform_content(v.clone(), &[3]).unwrap();
        let c = v.content_ids();
        let y = Sequence::from_ids(vec![c[1], c[3], c[0]]);
        let pll = pseudo_log_likelihood(&m, &y, &Sequence::empty()).unwrap();
        assert!((pll + 3.0 * 4f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn pseudo_ll_matches_direct_re_implementation() {
        let v = bare_vocab(3);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let m = TabularJointModel::random_content(v.clone(), &[3], &mut rng).unwrap();
        let c = v.content_ids();
        let y = Sequence::from_ids(vec![c[2], c[0], c[1]]);
        let pll = pseudo_log_likelihood(&m, &y, &Sequence::empty()).unwrap();

        // independent sum over masked re-queries
        let mut direct = 0.0;
        for i in 0..3 {
            let mut ids = y.ids().to_vec();
            ids[i] = v.mask_id();
            let masked = Sequence::from_ids(ids);
            let row = m.conditional(&masked, &[i], &Sequence::empty()).unwrap().remove(0);
            direct += row[y.get(i)].ln();
        }
        assert!((pll - direct).abs() < 1e-12);

        // permutation consistency: reverse order gives the same sum
        let mut rev = 0.0;
        for i in (0..3).rev() {
            let row = m.conditional(&y, &[i], &Sequence::empty()).unwrap().remove(0);
            rev += row[y.get(i)].ln();
        }
        assert!((pll - rev).abs() < 1e-12);
    }

    #[test]
    fn pseudo_ll_rejects_masked_input() {
        let v = bare_vocab(2);
        let m = TabularJointModel::uniform_content(v.clone(), &[2]).unwrap();
        let y = Sequence::from_ids(vec![v.mask_id(), v.content_ids()[0]]);
        assert!(pseudo_log_likelihood(&m, &y, &Sequence::empty()).is_err());
    }

    #[test]
    fn exact_map_point_mass_and_tie_rule() {
        let v = bare_vocab(3);
        let c = v.content_ids();
        let target = Sequence::from_ids(vec![c[1], c[2], c[0]]);
        let m = TabularJointModel::point_mass(v.clone(), &target).unwrap();
        assert_eq!(tabular_exact_map(&m, &Sequence::empty(), 3).unwrap(), target);

        // uniform joint: lexicographically smallest wins
        let u = TabularJointModel::uniform_content(bare_vocab(2), &[2]).unwrap();
        let y = tabular_exact_map(&u, &Sequence::empty(), 2).unwrap();
        let smallest = u.vocab().content_ids()[0];
        assert_eq!(y.ids(), &[smallest, smallest]);
    }

    #[test]
    fn exact_map_matches_second_enumeration() {
        let v = bare_vocab(3);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let m = TabularJointModel::random_content(v.clone(), &[3], &mut rng).unwrap();
        let fast = tabular_exact_map(&m, &Sequence::empty(), 3).unwrap();
        // second, recursive enumeration
        let size = v.size();
        let mut best: Option<(f64, Vec<usize>)> = None;
        fn recurse(
            prefix: &mut Vec<usize>,
            len: usize,
            size: usize,
            m: &TabularJointModel,
            best: &mut Option<(f64, Vec<usize>)>,
        ) {
            if prefix.len() == len {
                let p = m.joint_prob(&Sequence::empty(), &Sequence::from_ids(prefix.clone())).unwrap();
                if best.as_ref().map_or(true, |(bp, _)| p > *bp) {
                    *best = Some((p, prefix.clone()));
                }
                return;
            }
            for id in 0..size {
                prefix.push(id);
                recurse(prefix, len, size, m, best);
                prefix.pop();
            }
        }
        recurse(&mut Vec::new(), 3, size, &m, &mut best);
        assert_eq!(fast.ids(), best.unwrap().1.as_slice());
    }

    #[test]
    fn with_specials_vocab_builds() {
        let v = tiny_vocab(&["x", "y"]);
        assert_eq!(v.size(), 6);
        assert!(v.is_special(v.mask_id()));
        assert_eq!(v.content_ids().len(), 2);
    }
}
