use std::collections::HashMap;
use std::path::Path;

use super::beam_search;
use crate::data::{parse_corpus, write_corpus, Pair};
use crate::model::SubModel;
use crate::parallel::map_indexed;
use crate::{Error, Result};

const FORMAT_TAG: &str = "scalant-distill v1";

/// Decoding settings and filtering caps for target generation.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillOptions {
    pub beam: usize,
    pub alpha: f64,
    /// Largest allowed `max(len_src, len_tgt) / min(len_src, len_tgt)`.
    pub ratio_cap: f64,
    /// Largest allowed source or target length.
    pub len_cap: usize,
    /// Decoding limit in generated tokens.
    pub max_len: usize,
}

impl DistillOptions {
    pub fn new(max_len: usize) -> Self {
        DistillOptions {
            beam: 4,
            alpha: 0.6,
            ratio_cap: 20.0,
            len_cap: 250,
            max_len,
        }
    }
}

/// Where a distillation corpus came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub checkpoint: String,
    pub beam: usize,
    pub alpha: f64,
    pub ratio_cap: f64,
    pub len_cap: usize,
    pub sources: usize,
}

/// Sources paired with targets beam-decoded by the widest model.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillCorpus {
    pub pairs: Vec<Pair>,
    pub provenance: Provenance,
    index: HashMap<Vec<usize>, usize>,
}

/// Length ratio `max / min` of a pair; infinite when one side is empty.
pub fn length_ratio(src_len: usize, tgt_len: usize) -> f64 {
    let (lo, hi) = (src_len.min(tgt_len), src_len.max(tgt_len));
    if lo == 0 {
        f64::INFINITY
    } else {
        hi as f64 / lo as f64
    }
}

/// True when a pair satisfies both caps.
pub fn passes_filter(src_len: usize, tgt_len: usize, ratio_cap: f64, len_cap: usize) -> bool {
    length_ratio(src_len, tgt_len) <= ratio_cap && src_len <= len_cap && tgt_len <= len_cap
}

/// Keeps pairs that pass the ratio and length caps.
pub fn filter_pairs(pairs: Vec<Pair>, ratio_cap: f64, len_cap: usize) -> Vec<Pair> {
    pairs
        .into_iter()
        .filter(|p| passes_filter(p.src.len(), p.tgt.len(), ratio_cap, len_cap))
        .collect()
}

/// Beam-decodes every source with the widest model and drops pairs that
/// violate the caps. Output order follows source order.
pub fn generate_distill_corpus<S: AsRef<[usize]> + Sync>(
    widest: &SubModel<'_>,
    sources: &[S],
    options: &DistillOptions,
    checkpoint: &str,
) -> Result<DistillCorpus> {
    if !widest.spec().is_widest(widest.config()) {
        return Err(Error::Spec(format!(
            "distillation targets come from the widest model, not {}",
            widest.spec()
        )));
    }
    let decoded = map_indexed(sources.len(), |i| {
        beam_search(widest, sources[i].as_ref(), options.beam, options.alpha, options.max_len)
    });
    let mut pairs = Vec::with_capacity(sources.len());
    for (src, hyp) in sources.iter().zip(decoded) {
        pairs.push(Pair {
            src: src.as_ref().to_vec(),
            tgt: hyp?.output().to_vec(),
        });
    }
    let pairs = filter_pairs(pairs, options.ratio_cap, options.len_cap);
    if pairs.is_empty() {
        return Err(Error::invalid("every decoded pair was filtered out"));
    }
    Ok(DistillCorpus::new(
        pairs,
        Provenance {
            checkpoint: checkpoint.to_string(),
            beam: options.beam,
            alpha: options.alpha,
            ratio_cap: options.ratio_cap,
            len_cap: options.len_cap,
            sources: sources.len(),
        },
    ))
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

fn parse_ids(text: &str, line: usize) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::format("distill corpus", format!("pair {line}: bad token id {t:?}")))
        })
        .collect()
}

impl DistillCorpus {
    pub fn new(pairs: Vec<Pair>, provenance: Provenance) -> Self {
        let mut index = HashMap::with_capacity(pairs.len());
        for (i, p) in pairs.iter().enumerate() {
            index.entry(p.src.clone()).or_insert(i);
        }
        DistillCorpus {
            pairs,
            provenance,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Beam target recorded for `src`.
    pub fn lookup(&self, src: &[usize]) -> Result<&[usize]> {
        self.index
            .get(src)
            .map(|&i| self.pairs[i].tgt.as_slice())
            .ok_or_else(|| Error::Missing(format!("source {src:?} is not in the distillation corpus")))
    }

    /// Writes the corpus: `# key=value` provenance lines, then one
    /// `source ids<TAB>target ids` line per pair.
    pub fn save(&self, path: &Path) -> Result<()> {
        let p = &self.provenance;
        let header = vec![
            FORMAT_TAG.to_string(),
            format!("checkpoint={}", p.checkpoint),
            format!("beam={}", p.beam),
            format!("alpha={}", p.alpha),
            format!("ratio_cap={}", p.ratio_cap),
            format!("len_cap={}", p.len_cap),
            format!("sources={}", p.sources),
        ];
        let body: Vec<(String, String)> = self
            .pairs
            .iter()
            .map(|p| (join_ids(&p.src), join_ids(&p.tgt)))
            .collect();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        write_corpus(path, &header, &body)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Missing(format!("distillation corpus {}: {e}", path.display())))?;
        let mut fields = HashMap::new();
        let mut lines = text.lines().filter_map(|l| l.strip_prefix("# "));
        if lines.next() != Some(FORMAT_TAG) {
            return Err(Error::format("distill corpus", format!("missing {FORMAT_TAG:?} header")));
        }
        for line in lines {
            if let Some((k, v)) = line.split_once('=') {
                fields.insert(k.to_string(), v.to_string());
            }
        }
        let field = |k: &str| {
            fields
                .get(k)
                .cloned()
                .ok_or_else(|| Error::format("distill corpus", format!("missing header field {k}")))
        };
        let num = |k: &str| -> Result<f64> {
            field(k)?
                .parse()
                .map_err(|_| Error::format("distill corpus", format!("bad header field {k}")))
        };
        let provenance = Provenance {
            checkpoint: field("checkpoint")?,
            beam: num("beam")? as usize,
            alpha: num("alpha")?,
            ratio_cap: num("ratio_cap")?,
            len_cap: num("len_cap")? as usize,
            sources: num("sources")? as usize,
        };
        let pairs = parse_corpus(&text)?
            .iter()
            .enumerate()
            .map(|(i, (s, t))| {
                Ok(Pair {
                    src: parse_ids(s, i + 1)?,
                    tgt: parse_ids(t, i + 1)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(p) = pairs
            .iter()
            .find(|p| !passes_filter(p.src.len(), p.tgt.len(), provenance.ratio_cap, provenance.len_cap))
        {
            return Err(Error::format(
                "distill corpus",
                format!("pair with source {:?} violates the recorded caps", p.src),
            ));
        }
        Ok(DistillCorpus::new(pairs, provenance))
    }
}
