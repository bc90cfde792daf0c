use super::incremental::{HypCache, IncrementalDecoder, SourceState};
use crate::data::{BOS, EOS, PAD};
use crate::model::SubModel;
use crate::tensor::kernels;
use crate::{Error, Result};

/// A decoded (possibly partial) target sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated ids after BOS; a finished hypothesis ends in EOS unless it
    /// ran into the length limit.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens with the trailing EOS removed.
    pub fn output(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    /// `log_prob / len^alpha`, with `len` counting the EOS step.
    pub fn score(&self, alpha: f64) -> f64 {
        length_normalized(self.log_prob, self.tokens.len(), alpha)
    }
}

pub fn length_normalized(log_prob: f64, len: usize, alpha: f64) -> f64 {
    log_prob / (len.max(1) as f64).powf(alpha)
}

/// Ids a decoder may emit: everything except PAD and BOS.
pub fn emittable(token: usize) -> bool {
    token != PAD && token != BOS
}

fn check_max_len(dec: &IncrementalDecoder<'_>, max_len: usize) -> Result<()> {
    if max_len == 0 || max_len > dec.max_steps() {
        return Err(Error::invalid(format!(
            "max_len must be in 1..={}, got {max_len}",
            dec.max_steps()
        )));
    }
    Ok(())
}

/// Greedy decoding: the highest-probability emittable token at each step
/// (lowest id on ties), stopping at EOS or after `max_len` tokens.
pub fn greedy_decode(sub: &SubModel<'_>, src: &[usize], max_len: usize) -> Result<Vec<usize>> {
    Ok(greedy_decode_batch(sub, &[src], max_len)?.pop().expect("one source"))
}

/// Greedy decoding of many sources, stepping all unfinished rows together.
pub fn greedy_decode_batch<S: AsRef<[usize]>>(sub: &SubModel<'_>, sources: &[S], max_len: usize) -> Result<Vec<Vec<usize>>> {
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    let dec = IncrementalDecoder::new(sub)?;
    check_max_len(&dec, max_len)?;
    let refs: Vec<&[usize]> = sources.iter().map(|s| s.as_ref()).collect();
    let states = dec.encode(&refs)?;
    let vocab = sub.config().vocab_size;
    let mut outputs: Vec<Vec<usize>> = vec![Vec::new(); sources.len()];
    let mut active: Vec<usize> = (0..sources.len()).collect();
    let mut caches: Vec<HypCache> = active.iter().map(|_| dec.empty_cache()).collect();
    let mut last = vec![dec.start_token(); sources.len()];
    let mut prefix = vec![0.0; sources.len()];
    for _ in 0..max_len {
        if active.is_empty() {
            break;
        }
        let srcs: Vec<&SourceState> = active.iter().map(|&i| &states[i]).collect();
        let lp = dec.step(&srcs, &mut caches, &last)?;
        let mut keep = Vec::with_capacity(active.len());
        for (row, &i) in active.iter().enumerate() {
            let (tok, total) = best_token(prefix[i], &lp[row * vocab..(row + 1) * vocab]);
            prefix[i] = total;
            if tok == EOS {
                continue;
            }
            outputs[i].push(tok);
            keep.push(row);
        }
        active = keep.iter().map(|&r| active[r]).collect();
        caches = keep.iter().map(|&r| std::mem::take(&mut caches[r])).collect();
        last = active.iter().map(|&i| *outputs[i].last().expect("just pushed")).collect();
    }
    Ok(outputs)
}

/// Best emittable continuation of a prefix scoring `prefix`, compared on
/// the accumulated score exactly as a width-1 beam would.
fn best_token(prefix: f64, log_probs: &[f64]) -> (usize, f64) {
    let mut total: Vec<f64> = log_probs.iter().map(|lp| prefix + lp).collect();
    total[PAD] = f64::NEG_INFINITY;
    total[BOS] = f64::NEG_INFINITY;
    let tok = kernels::argmax(&total);
    (tok, total[tok])
}

struct Live {
    hyp: Hypothesis,
    cache: HypCache,
}

/// Beam search with length penalty `alpha` (`score = log_prob / len^alpha`).
///
/// Each step expands every live hypothesis by every emittable token and
/// ranks candidates by accumulated log-probability, ties by (parent rank,
/// token id). Candidates ending in EOS, or reaching `max_len`, are finished
/// when they rank inside the top `beam`; the best `beam` unfinished
/// candidates stay live. Search stops once `beam` hypotheses have finished,
/// nothing is live, or no live hypothesis can still beat the best finished
/// score.
pub fn beam_search(sub: &SubModel<'_>, src: &[usize], beam: usize, alpha: f64, max_len: usize) -> Result<Hypothesis> {
    if beam == 0 {
        return Err(Error::invalid("beam must be at least 1"));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("length penalty must be >= 0, got {alpha}")));
    }
    let dec = IncrementalDecoder::new(sub)?;
    check_max_len(&dec, max_len)?;
    let state = dec.encode(&[src])?.pop().expect("one source");
    let vocab = sub.config().vocab_size;
    let mut live = vec![Live {
        hyp: Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: false,
        },
        cache: dec.empty_cache(),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..max_len {
        let srcs = vec![&state; live.len()];
        let last: Vec<usize> = live
            .iter()
            .map(|l| l.hyp.tokens.last().copied().unwrap_or(BOS))
            .collect();
        let mut caches: Vec<HypCache> = live.iter_mut().map(|l| std::mem::take(&mut l.cache)).collect();
        let lp = dec.step(&srcs, &mut caches, &last)?;
        for (l, c) in live.iter_mut().zip(caches) {
            l.cache = c;
        }
        let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * vocab);
        for (p, l) in live.iter().enumerate() {
            for tok in (0..vocab).filter(|&t| emittable(t)) {
                cands.push((l.hyp.log_prob + lp[p * vocab + tok], p, tok));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let at_limit = step + 1 == max_len;
        let mut next = Vec::with_capacity(beam);
        for (rank, &(log_prob, p, tok)) in cands.iter().enumerate() {
            let done = tok == EOS || at_limit;
            if done {
                if rank < beam {
                    let mut tokens = live[p].hyp.tokens.clone();
                    tokens.push(tok);
                    finished.push(Hypothesis {
                        tokens,
                        log_prob,
                        finished: true,
                    });
                }
            } else if next.len() < beam {
                let mut tokens = live[p].hyp.tokens.clone();
                tokens.push(tok);
                next.push(Live {
                    hyp: Hypothesis {
                        tokens,
                        log_prob,
                        finished: false,
                    },
                    cache: live[p].cache.clone(),
                });
            }
            if rank + 1 >= beam && next.len() >= beam {
                break;
            }
        }
        live = next;
        if finished.len() >= beam || live.is_empty() {
            break;
        }
        let best_done = finished.iter().map(|h| h.score(alpha)).fold(f64::NEG_INFINITY, f64::max);
        let best_possible = live
            .iter()
            .map(|l| length_normalized(l.hyp.log_prob, max_len, alpha))
            .fold(f64::NEG_INFINITY, f64::max);
        if best_done >= best_possible {
            break;
        }
    }
    let mut best: Option<Hypothesis> = None;
    for h in finished {
        if best.as_ref().is_none_or(|b| h.score(alpha) > b.score(alpha)) {
            best = Some(h);
        }
    }
    best.ok_or_else(|| Error::invalid("beam search finished no hypothesis"))
}
