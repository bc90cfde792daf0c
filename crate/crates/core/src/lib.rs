//! Width-elastic, weight-sharing Transformers for sequence-to-sequence tasks.
//!
//! A single widest parameter store holds every weight. Narrower
//! sub-Transformers are top-left crops of those matrices, so training any
//! sub-model updates the shared store in place. Training runs in three
//! stages: joint sub-model pre-training, annealed word-level
//! self-distillation, and sequence-level self-distillation from beam-searched
//! targets produced by the widest model.
//!
//! Modules, bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors and a reverse-mode autodiff tape.
//! - [`model`]: configuration, parameter store, width specs, forward passes.
//! - [`data`]: vocabularies, synthetic tasks, corpora, token-budget batching.
//! - [`decoding`]: greedy and beam-search decoding, distillation corpora.
//! - [`training`]: stage losses, schedules, ADAM, the training loop.
//! - [`evaluation`]: BLEU, token accuracy, cost accounting, sub-model search.

pub mod data;
pub mod decoding;
mod error;
pub mod evaluation;
pub mod model;
mod parallel;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use parallel::worker_count;
