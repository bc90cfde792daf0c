use serde::{Deserialize, Serialize};

use super::AdamConfig;
use crate::model::Variant;
use crate::{Error, Result};

/// Settings for one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    /// 1: joint pre-training, 2: word-level distillation, 3: sequence-level
    /// distillation on beam targets.
    pub stage: u8,
    pub variant: Variant,
    /// Sub-models drawn per iteration in addition to the widest.
    pub n_sampled: usize,
    /// Iteration after which the stage-2 hard-target weight stays at 0.5.
    pub lambda2_threshold: u64,
    /// Stage-3 hard-target weight for sub-models.
    pub lambda3: f64,
    pub max_lr: f64,
    pub warmup_iters: u64,
    pub epochs: usize,
    /// Optional cap on optimizer steps for the whole stage.
    pub max_steps: Option<u64>,
    pub label_smoothing: f64,
    pub grad_accum_steps: usize,
    /// Source plus target tokens per micro-batch.
    pub token_budget: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Validation pairs used per record (all when unset).
    pub valid_limit: Option<usize>,
    /// Extra validation record every this-many steps.
    pub valid_every: Option<u64>,
    /// The stage ends with the mean of this many most recent snapshots;
    /// 0 or 1 keeps the final weights.
    pub average_last: usize,
    /// Steps between snapshots; epoch ends when unset.
    pub snapshot_every: Option<u64>,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            stage: 1,
            variant: Variant::Type1,
            n_sampled: 3,
            lambda2_threshold: 4000,
            lambda3: 0.1,
            max_lr: 0.007,
            warmup_iters: 4000,
            epochs: 60,
            max_steps: None,
            label_smoothing: 0.1,
            grad_accum_steps: 1,
            token_budget: 3584,
            adam: AdamConfig::default(),
            seed: 1,
            valid_limit: None,
            valid_every: None,
            average_last: 0,
            snapshot_every: None,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(1..=3).contains(&self.stage) {
            return fail(format!("stage must be 1, 2 or 3, got {}", self.stage));
        }
        if !(0.0..=1.0).contains(&self.lambda3) {
            return fail(format!("lambda3 must be in [0, 1], got {}", self.lambda3));
        }
        if self.warmup_iters == 0 || self.lambda2_threshold == 0 {
            return fail("warmup_iters and lambda2_threshold must be positive".into());
        }
        if self.n_sampled == 0 {
            return fail("n_sampled must be at least 1".into());
        }
        if self.grad_accum_steps == 0 || self.token_budget == 0 || self.epochs == 0 {
            return fail("grad_accum_steps, token_budget and epochs must be positive".into());
        }
        if self.valid_every == Some(0) || self.snapshot_every == Some(0) {
            return fail("valid_every and snapshot_every must be positive".into());
        }
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return fail(format!("max_lr must be positive, got {}", self.max_lr));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!("label_smoothing must be in [0, 1), got {}", self.label_smoothing));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return fail("adam needs beta1, beta2 in [0, 1) and eps > 0".into());
        }
        Ok(())
    }
}
