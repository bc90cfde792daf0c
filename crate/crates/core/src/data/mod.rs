//! Vocabularies, synthetic tasks, corpus files and token-budget batching.

mod batch;
mod corpus;
mod synth;
mod vocab;

pub use batch::{make_batches, Batch, Padded};
pub(crate) use corpus::parse_corpus;
pub use corpus::{encode_pairs, read_corpus, read_pairs, write_corpus, Pair};
pub use synth::{synth_task, TaskKind};
pub use vocab::{build_vocab, Vocab, BOS, EOS, NUM_RESERVED, PAD, UNK};
