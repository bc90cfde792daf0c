use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Pair, BOS, EOS, PAD};
use crate::{Error, Result};

/// Right-padded id matrix `rows x width`; `lengths[r]` positions of row `r`
/// are real tokens, the rest are PAD.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Padded {
    pub ids: Vec<usize>,
    pub rows: usize,
    pub width: usize,
    pub lengths: Vec<usize>,
}

impl Padded {
    pub fn from_seqs<S: AsRef<[usize]>>(seqs: &[S]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::invalid("cannot pad zero sequences"));
        }
        let lengths: Vec<usize> = seqs.iter().map(|s| s.as_ref().len()).collect();
        if lengths.contains(&0) {
            return Err(Error::invalid("cannot pad an empty sequence"));
        }
        let width = *lengths.iter().max().unwrap_or(&1);
        let mut ids = vec![PAD; seqs.len() * width];
        for (r, s) in seqs.iter().enumerate() {
            ids[r * width..r * width + s.as_ref().len()].copy_from_slice(s.as_ref());
        }
        Ok(Padded {
            ids,
            rows: seqs.len(),
            width,
            lengths,
        })
    }

    /// 1.0 at real tokens, 0.0 at padding; row-major like `ids`.
    pub fn mask(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.ids.len()];
        for (r, &len) in self.lengths.iter().enumerate() {
            m[r * self.width..r * self.width + len].fill(1.0);
        }
        m
    }

    pub fn is_real(&self, row: usize, pos: usize) -> bool {
        pos < self.lengths[row]
    }

    pub fn n_real(&self) -> usize {
        self.lengths.iter().sum()
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.ids[r * self.width..r * self.width + self.lengths[r]]
    }
}

/// Source ids, decoder inputs (`BOS + target`) and decoder outputs
/// (`target + EOS`) for a group of pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub src: Padded,
    pub tgt_in: Padded,
    pub tgt_out: Padded,
    /// Positions of these pairs in the list the batch was built from.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn from_pairs(pairs: &[&Pair], indices: Vec<usize>) -> Result<Self> {
        let src: Vec<&[usize]> = pairs.iter().map(|p| p.src.as_slice()).collect();
        let tgt_in: Vec<Vec<usize>> = pairs
            .iter()
            .map(|p| std::iter::once(BOS).chain(p.tgt.iter().copied()).collect())
            .collect();
        let tgt_out: Vec<Vec<usize>> = pairs
            .iter()
            .map(|p| p.tgt.iter().copied().chain(std::iter::once(EOS)).collect())
            .collect();
        Ok(Batch {
            src: Padded::from_seqs(&src)?,
            tgt_in: Padded::from_seqs(&tgt_in)?,
            tgt_out: Padded::from_seqs(&tgt_out)?,
            indices,
        })
    }

    /// Convenience for a batch over a whole slice.
    pub fn of(pairs: &[Pair]) -> Result<Self> {
        let refs: Vec<&Pair> = pairs.iter().collect();
        Batch::from_pairs(&refs, (0..pairs.len()).collect())
    }

    pub fn len(&self) -> usize {
        self.src.rows
    }

    pub fn is_empty(&self) -> bool {
        self.src.rows == 0
    }

    /// Non-pad source plus target tokens (specials excluded).
    pub fn n_tokens(&self) -> usize {
        self.src.n_real() + self.tgt_out.n_real() - self.tgt_out.rows
    }

    /// Number of supervised target positions (target tokens plus EOS).
    pub fn n_target_positions(&self) -> usize {
        self.tgt_out.n_real()
    }

    /// Splits into at most `parts` contiguous micro-batches of near-equal
    /// pair counts.
    pub fn split(&self, parts: usize, pairs: &[Pair]) -> Result<Vec<Batch>> {
        let parts = parts.clamp(1, self.len());
        let base = self.len() / parts;
        let extra = self.len() % parts;
        let mut out = Vec::with_capacity(parts);
        let mut start = 0;
        for p in 0..parts {
            let n = base + usize::from(p < extra);
            let idx = self.indices[start..start + n].to_vec();
            let refs: Vec<&Pair> = idx.iter().map(|&i| &pairs[i]).collect();
            out.push(Batch::from_pairs(&refs, idx)?);
            start += n;
        }
        Ok(out)
    }
}

fn pair_tokens(p: &Pair) -> usize {
    p.src.len() + p.tgt.len()
}

/// Groups pairs into batches of at most `token_budget` source+target
/// tokens. Pairs are shuffled by `seed`, bucketed by length so padding stays
/// small, and the batch order is shuffled again.
pub fn make_batches(pairs: &[Pair], token_budget: usize, seed: u64) -> Result<Vec<Batch>> {
    if let Some((i, p)) = pairs
        .iter()
        .enumerate()
        .find(|(_, p)| pair_tokens(p) > token_budget || p.src.is_empty())
    {
        return Err(Error::invalid(format!(
            "pair {i} ({} tokens) has an empty source or exceeds the token budget {token_budget}",
            pair_tokens(p)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| (pairs[i].src.len(), pairs[i].tgt.len()));

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current = Vec::new();
    let mut used = 0;
    for i in order {
        let n = pair_tokens(&pairs[i]);
        if used + n > token_budget && !current.is_empty() {
            groups.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(i);
        used += n;
    }
    if !current.is_empty() {
        groups.push(current);
    }
    groups.shuffle(&mut rng);
    groups
        .into_iter()
        .map(|idx| {
            let refs: Vec<&Pair> = idx.iter().map(|&i| &pairs[i]).collect();
            Batch::from_pairs(&refs, idx)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_task, TaskKind};

    #[test]
    fn single_pair_single_batch() {
        let pairs = vec![Pair {
            src: vec![5, 6],
            tgt: vec![6, 5],
        }];
        let batches = make_batches(&pairs, 10, 0).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].tgt_in.row(0), &[BOS, 6, 5]);
        assert_eq!(batches[0].tgt_out.row(0), &[6, 5, EOS]);
        assert!(make_batches(&pairs, 3, 0).is_err());
    }

    #[test]
    fn conservation_budget_and_determinism() {
        let pairs = synth_task(TaskKind::Reverse, 500, 30, (2, 9), 1).unwrap();
        let batches = make_batches(&pairs, 64, 9).unwrap();
        let total: usize = batches.iter().map(Batch::n_tokens).sum();
        assert_eq!(total, pairs.iter().map(pair_tokens).sum::<usize>());
        assert!(batches.iter().all(|b| b.n_tokens() <= 64));
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..500).collect::<Vec<_>>());
        assert_eq!(batches, make_batches(&pairs, 64, 9).unwrap());
    }

    #[test]
    fn padding_and_masks() {
        let p = Padded::from_seqs(&[vec![4, 5, 6], vec![7]]).unwrap();
        assert_eq!(p.ids, vec![4, 5, 6, 7, PAD, PAD]);
        assert_eq!(p.mask(), vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        assert!(Padded::from_seqs::<Vec<usize>>(&[]).is_err());
    }

    #[test]
    fn split_preserves_pairs() {
        let pairs = synth_task(TaskKind::Copy, 7, 20, (1, 5), 2).unwrap();
        let full = Batch::of(&pairs).unwrap();
        let halves = full.split(2, &pairs).unwrap();
        assert_eq!(halves.len(), 2);
        assert_eq!(halves[0].len() + halves[1].len(), 7);
        assert_eq!(
            halves.iter().map(Batch::n_tokens).sum::<usize>(),
            full.n_tokens()
        );
    }
}
