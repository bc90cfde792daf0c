use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Pair, NUM_RESERVED};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
}

impl TaskKind {
    pub fn apply(self, src: &[usize]) -> Vec<usize> {
        let mut out = src.to_vec();
        match self {
            TaskKind::Copy => {}
            TaskKind::Reverse => out.reverse(),
            TaskKind::Sort => out.sort_unstable(),
        }
        out
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Sort => "sort",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "sort" => Ok(TaskKind::Sort),
            other => Err(Error::invalid(format!("unknown task {other:?}"))),
        }
    }
}

/// Random token sequences (ids in `NUM_RESERVED..vocab_size`, lengths
/// uniform in `min_len..=max_len`) paired with the task's transform.
pub fn synth_task(
    kind: TaskKind,
    n_pairs: usize,
    vocab_size: usize,
    (min_len, max_len): (usize, usize),
    seed: u64,
) -> Result<Vec<Pair>> {
    if vocab_size <= NUM_RESERVED {
        return Err(Error::invalid(format!("vocab size {vocab_size} leaves no content tokens")));
    }
    if min_len == 0 || min_len > max_len {
        return Err(Error::invalid(format!("bad length range {min_len}..={max_len}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_pairs)
        .map(|_| {
            let len = rng.gen_range(min_len..=max_len);
            let src: Vec<usize> = (0..len).map(|_| rng.gen_range(NUM_RESERVED..vocab_size)).collect();
            let tgt = kind.apply(&src);
            Pair { src, tgt }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transforms() {
        assert_eq!(TaskKind::Reverse.apply(&[3, 5, 7]), vec![7, 5, 3]);
        assert_eq!(TaskKind::Sort.apply(&[9, 4, 4, 6]), vec![4, 4, 6, 9]);
        assert_eq!(TaskKind::Copy.apply(&[9, 4]), vec![9, 4]);
    }

    #[test]
    fn generated_pairs_respect_contract() {
        let pairs = synth_task(TaskKind::Copy, 200, 64, (4, 12), 5).unwrap();
        assert_eq!(pairs.len(), 200);
        for p in &pairs {
            assert_eq!(p.src, p.tgt);
            assert!((4..=12).contains(&p.src.len()));
            assert!(p.src.iter().all(|&t| (NUM_RESERVED..64).contains(&t)));
        }
        assert_eq!(pairs, synth_task(TaskKind::Copy, 200, 64, (4, 12), 5).unwrap());
        assert!(synth_task(TaskKind::Copy, 1, 4, (1, 2), 0).is_err());
        assert!(synth_task(TaskKind::Copy, 1, 10, (3, 2), 0).is_err());
    }
}
