//! Three-stage training: losses, schedules, ADAM and the training loop.

mod average;
mod config;
mod loss;
mod optim;
mod schedule;
mod trainer;

pub use average::{average_checkpoints, average_stores};
pub use config::StageConfig;
pub use loss::{distill_loss, label_smooth, soft_targets, stage1_loss, Targets};
pub use optim::{adam_step, AdamConfig, GradBuffer, OptimizerState};
pub use schedule::{lambda2, lr_at, WARMUP_INIT_LR};
pub use trainer::{
    probe_specs, train_stage, validate_specs, window_gradients, EpochRecord, Objective, SpecMetrics, TrainReport,
    METRICS_HEADER,
};

use crate::tensor::{Tape, Var};
use crate::Result;

/// Word-level self-distillation loss at iteration `j` with threshold `t_j`.
pub fn stage2_loss(tape: &mut Tape, widest: Var, subs: &[Var], targets: &Targets, j: u64, t_j: u64) -> Result<Var> {
    distill_loss(tape, widest, subs, targets, lambda2(j, t_j))
}

/// Sequence-level self-distillation loss; `targets` are built from beam
/// outputs of the widest model.
pub fn stage3_loss(tape: &mut Tape, widest: Var, subs: &[Var], targets: &Targets, lambda3: f64) -> Result<Var> {
    distill_loss(tape, widest, subs, targets, lambda3)
}
