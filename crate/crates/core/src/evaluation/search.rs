use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{bleu, estimate_flops, count_params, teacher_forced_stats};
use crate::data::Pair;
use crate::decoding::greedy_decode_batch;
use crate::model::{materialize, sample_type2_from, ModelConfig, ParameterStore, WidthSpec};
use crate::model::sampler::check_subset;
use crate::{Error, Result};

/// How search candidates are scored on the validation pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SearchMetric {
    /// Teacher-forced token accuracy.
    Accuracy,
    /// Corpus BLEU of greedy decodes, capped at `max_len` tokens.
    Bleu { max_len: usize },
}

/// Scores one sub-model on `pairs`.
pub fn evaluate_spec(store: &ParameterStore, spec: &WidthSpec, pairs: &[Pair], metric: SearchMetric) -> Result<f64> {
    let sub = materialize(store, spec)?;
    match metric {
        SearchMetric::Accuracy => Ok(teacher_forced_stats(&sub, pairs)?.accuracy()),
        SearchMetric::Bleu { max_len } => {
            let sources: Vec<&[usize]> = pairs.iter().map(|p| p.src.as_slice()).collect();
            let hyps = greedy_decode_batch(&sub, &sources, max_len)?;
            let refs: Vec<Vec<usize>> = pairs.iter().map(|p| p.tgt.clone()).collect();
            bleu(&hyps, &refs, 4)
        }
    }
}

/// Every type-2 spec whose attention widths come from `menu`, in
/// lexicographic order of the widths.
pub fn enumerate_type2(config: &ModelConfig, menu: &[usize]) -> Result<Vec<WidthSpec>> {
    check_subset(config, menu)?;
    let layers = config.n_layers() as u32;
    let mut sorted = menu.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let k = sorted.len();
    let total = k
        .checked_pow(layers)
        .filter(|&t| t <= 1 << 24)
        .ok_or_else(|| Error::invalid("type-2 space too large to enumerate"))?;
    Ok((0..total)
        .map(|mut code| {
            let mut widths = vec![0; layers as usize];
            for w in widths.iter_mut().rev() {
                *w = sorted[code % k];
                code /= k;
            }
            WidthSpec::type2(config, widths)
        })
        .collect())
}

/// Size of the type-2 space over `menu` (`|menu|^layers`), saturating.
pub fn type2_space(config: &ModelConfig, menu: &[usize]) -> u128 {
    let k: BTreeSet<usize> = menu.iter().copied().collect();
    (k.len() as u128).saturating_pow(config.n_layers() as u32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchEntry {
    pub spec: WidthSpec,
    pub metric: f64,
    pub params: u64,
    pub flops: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchReport {
    /// Best first; ties keep sampling order.
    pub entries: Vec<SearchEntry>,
    pub top_k: usize,
    pub top_k_mean: f64,
    /// Sample standard deviation (zero for a single entry).
    pub top_k_std: f64,
    pub widest_metric: f64,
    /// True when the best sampled sub-model scores at least the widest.
    pub beats_widest: bool,
    pub space: u128,
}

/// `mean±std` with `digits` decimals, e.g. `26.820±0.036`.
pub fn format_mean_std(mean: f64, std: f64, digits: usize) -> String {
    format!("{mean:.digits$}±{std:.digits$}")
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Draws `n_samples` distinct type-2 specs over `menu` (all of them when
/// the space is smaller), scores each on `val`, and ranks them.
pub fn random_search_type2(
    store: &ParameterStore,
    menu: &[usize],
    n_samples: usize,
    val: &[Pair],
    top_k: usize,
    seed: u64,
    metric: SearchMetric,
) -> Result<SearchReport> {
    let config = store.config();
    check_subset(config, menu)?;
    if n_samples == 0 || top_k == 0 {
        return Err(Error::invalid("search needs n_samples >= 1 and top_k >= 1"));
    }
    let space = type2_space(config, menu);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = if space <= 4 * n_samples as u128 {
        let mut all = enumerate_type2(config, menu)?;
        all.shuffle(&mut rng);
        all.truncate(n_samples);
        all
    } else {
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(n_samples);
        while out.len() < n_samples {
            let s = sample_type2_from(config, menu, &mut rng)?;
            if seen.insert(s.clone()) {
                out.push(s);
            }
        }
        out
    };
    let mut entries = Vec::with_capacity(specs.len());
    for spec in specs {
        entries.push(SearchEntry {
            metric: evaluate_spec(store, &spec, val, metric)?,
            params: count_params(config, &spec, true)?,
            flops: estimate_flops(config, &spec, 20, 20)?,
            spec,
        });
    }
    entries.sort_by(|a, b| b.metric.total_cmp(&a.metric));
    let widest_metric = evaluate_spec(store, &WidthSpec::widest(config), val, metric)?;
    let top: Vec<f64> = entries.iter().take(top_k).map(|e| e.metric).collect();
    let (top_k_mean, top_k_std) = mean_std(&top);
    Ok(SearchReport {
        beats_widest: entries[0].metric >= widest_metric,
        top_k: top.len(),
        top_k_mean,
        top_k_std,
        widest_metric,
        space,
        entries,
    })
}

impl SearchReport {
    /// One CSV row per spec plus a trailing summary row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,spec,params,flops,metric\n");
        for (i, e) in self.entries.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{:.0},{:.6}", i + 1, e.spec, e.params, e.flops, e.metric);
        }
        let _ = writeln!(
            out,
            "summary,top{}={},widest={:.6},beats_widest={},space={}",
            self.top_k,
            format_mean_std(self.top_k_mean, self.top_k_std, 4),
            self.widest_metric,
            self.beats_widest,
            self.space
        );
        out
    }

    /// Note for reports when no sampled sub-model matched the widest.
    pub fn widest_note(&self) -> Option<String> {
        (!self.beats_widest).then(|| {
            format!(
                "no sampled sub-model reached the widest model's {:.6} (best {:.6})",
                self.widest_metric, self.entries[0].metric
            )
        })
    }
}
