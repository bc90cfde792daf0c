use crate::data::{Batch, Pair};
use crate::model::SubModel;
use crate::parallel::map_indexed;
use crate::tensor::{kernels, Tape};
use crate::{Error, Result};

/// Teacher-forced statistics over non-pad target positions (target tokens
/// plus EOS).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalStats {
    pub correct: usize,
    pub positions: usize,
    /// Summed negative log-likelihood of the reference tokens.
    pub nll: f64,
}

impl EvalStats {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.positions as f64
    }

    pub fn mean_nll(&self) -> f64 {
        self.nll / self.positions as f64
    }
}

/// Pairs per teacher-forced evaluation batch.
const EVAL_CHUNK: usize = 64;

pub fn teacher_forced_stats(sub: &SubModel<'_>, pairs: &[Pair]) -> Result<EvalStats> {
    if pairs.is_empty() {
        return Err(Error::invalid("evaluation over zero pairs"));
    }
    let chunks: Vec<&[Pair]> = pairs.chunks(EVAL_CHUNK).collect();
    let parts = map_indexed(chunks.len(), |i| chunk_stats(sub, chunks[i]));
    let mut total = EvalStats {
        correct: 0,
        positions: 0,
        nll: 0.0,
    };
    for p in parts {
        let p = p?;
        total.correct += p.correct;
        total.positions += p.positions;
        total.nll += p.nll;
    }
    if total.positions == 0 {
        return Err(Error::invalid("evaluation over zero target positions"));
    }
    Ok(total)
}

fn chunk_stats(sub: &SubModel<'_>, pairs: &[Pair]) -> Result<EvalStats> {
    let batch = Batch::of(pairs)?;
    let mut tape = Tape::inference();
    let logits = sub.forward(&mut tape, &batch, &mut rand::rngs::mock::StepRng::new(0, 0))?;
    let values = tape.value(logits);
    let n = values.last_dim();
    let mut stats = EvalStats {
        correct: 0,
        positions: 0,
        nll: 0.0,
    };
    for (r, row) in values.data().chunks_exact(n).enumerate() {
        let (b, t) = (r / batch.tgt_out.width, r % batch.tgt_out.width);
        if !batch.tgt_out.is_real(b, t) {
            continue;
        }
        let gold = batch.tgt_out.ids[r];
        stats.positions += 1;
        if kernels::argmax(row) == gold {
            stats.correct += 1;
        }
        stats.nll += kernels::log_sum_exp(row) - row[gold];
    }
    Ok(stats)
}

/// Fraction of non-pad target positions whose argmax prediction is right
/// under teacher forcing.
pub fn token_accuracy(sub: &SubModel<'_>, pairs: &[Pair]) -> Result<f64> {
    Ok(teacher_forced_stats(sub, pairs)?.accuracy())
}
