//! Greedy and beam-search decoding, and generation of sequence-level
//! distillation targets.

mod distill;
mod incremental;
mod search;

pub use distill::{
    filter_pairs, generate_distill_corpus, length_ratio, passes_filter, DistillCorpus, DistillOptions,
    Provenance,
};
pub use incremental::{HypCache, IncrementalDecoder, SourceState};
pub use search::{beam_search, emittable, greedy_decode, greedy_decode_batch, length_normalized, Hypothesis};
