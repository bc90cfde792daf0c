use std::collections::HashMap;
use std::hash::Hash;

use crate::{Error, Result};

fn ngram_counts<T: Hash + Eq>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU in `[0, 1]`: the geometric mean of clipped n-gram
/// precisions for `n = 1..=max_n`, times the brevity penalty. Any zero
/// precision gives 0.
pub fn bleu<T: Hash + Eq>(hypotheses: &[Vec<T>], references: &[Vec<T>], max_n: usize) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::invalid(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::invalid("BLEU of an empty corpus"));
    }
    if max_n == 0 {
        return Err(Error::invalid("BLEU needs max_n >= 1"));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if matches.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / max_n as f64;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}
