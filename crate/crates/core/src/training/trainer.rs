use std::collections::VecDeque;
use std::io::Write;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{adam_step, average_stores, distill_loss, lambda2, lr_at, stage1_loss, GradBuffer, OptimizerState, StageConfig, Targets};
use crate::data::{make_batches, Batch, Pair};
use crate::decoding::DistillCorpus;
use crate::evaluation::teacher_forced_stats;
use crate::model::{materialize, sample_distinct, ParameterStore, WidthSpec};
use crate::tensor::Tape;
use crate::{Error, Result};

/// Which stage objective a step optimizes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    /// Hard targets for every model.
    Joint,
    /// Hard targets for the widest; sub-models mix hard targets (weight
    /// `lambda`) with the widest model's softmax (weight `1 - lambda`).
    Distill { lambda: f64 },
}

/// Forward and backward passes of the widest model and `specs` over every
/// micro-batch of a window, normalized by the window's target positions.
/// `grads` is cleared first and receives the summed gradients; the window
/// loss is returned.
#[allow(clippy::too_many_arguments)]
pub fn window_gradients(
    store: &ParameterStore,
    micro: &[Batch],
    specs: &[WidthSpec],
    objective: Objective,
    label_smoothing: f64,
    grads: &mut GradBuffer,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    let config = store.config();
    let norm: usize = micro.iter().map(|b| b.n_target_positions()).sum();
    if norm == 0 {
        return Err(Error::invalid("accumulation window has no target positions"));
    }
    let widest = materialize(store, &WidthSpec::widest(config))?;
    let subs = specs.iter().map(|s| materialize(store, s)).collect::<Result<Vec<_>>>()?;
    grads.clear();
    let mut loss = 0.0;
    for batch in micro {
        let targets = Targets::new(&batch.tgt_out, config.vocab_size, label_smoothing, norm as f64)?;
        let mut tape = Tape::new();
        let top = widest.forward(&mut tape, batch, rng)?;
        let outs = subs
            .iter()
            .map(|s| s.forward(&mut tape, batch, rng))
            .collect::<Result<Vec<_>>>()?;
        let total = match objective {
            Objective::Joint => stage1_loss(&mut tape, top, &outs, &targets)?,
            Objective::Distill { lambda } => distill_loss(&mut tape, top, &outs, &targets, lambda)?,
        };
        loss += tape.value(total).item()?;
        grads.accumulate(&tape.backward(total)?)?;
    }
    Ok(loss)
}

/// Per-spec validation numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct SpecMetrics {
    pub spec: WidthSpec,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub metrics: Vec<SpecMetrics>,
}

pub const METRICS_HEADER: &str = "stage,epoch,step,lr,train_loss,spec,val_loss,val_accuracy";

impl EpochRecord {
    /// One CSV line per validated spec, matching [`METRICS_HEADER`].
    pub fn csv_lines(&self) -> Vec<String> {
        self.metrics
            .iter()
            .map(|m| {
                format!(
                    "{},{},{},{:.6e},{:.6},{},{:.6},{:.6}",
                    self.stage, self.epoch, self.step, self.lr, self.train_loss, m.spec, m.val_loss, m.val_accuracy
                )
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub steps: u64,
    pub records: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Every type-1 width of the menu, narrowest first.
pub fn probe_specs(store: &ParameterStore) -> Vec<WidthSpec> {
    let cfg = store.config();
    cfg.width_menu.iter().map(|&w| WidthSpec::type1(cfg, w)).collect()
}

pub fn validate_specs(store: &ParameterStore, specs: &[WidthSpec], valid: &[Pair]) -> Result<Vec<SpecMetrics>> {
    specs
        .iter()
        .map(|spec| {
            let stats = teacher_forced_stats(&materialize(store, spec)?, valid)?;
            Ok(SpecMetrics {
                spec: spec.clone(),
                val_loss: stats.mean_nll(),
                val_accuracy: stats.accuracy(),
            })
        })
        .collect()
}

/// Runs one training stage in place on `store`.
///
/// Stage 1 trains on `train` with hard targets; stage 2 adds the widest
/// model's soft predictions under the `lambda2` schedule; stage 3 trains on
/// the beam targets of `distill` with weight `lambda3`. Each iteration draws
/// `n_sampled` distinct non-widest specs, sums gradients over
/// `grad_accum_steps` micro-batches and takes one ADAM step. After each
/// epoch, and every `valid_every` steps when set, the type-1 probe widths
/// are validated on `valid` and a record is appended to the report (and
/// written to `log` as CSV). With `average_last > 1` the store ends as the
/// mean of the latest snapshots and one more record scores it.
pub fn train_stage(
    store: &mut ParameterStore,
    train: &[Pair],
    valid: &[Pair],
    distill: Option<&DistillCorpus>,
    config: &StageConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    config.validate()?;
    let data: &[Pair] = if config.stage == 3 {
        &distill
            .ok_or_else(|| Error::Missing("stage 3 needs a distillation corpus".into()))?
            .pairs
    } else {
        train
    };
    if data.is_empty() {
        return Err(Error::invalid("no training pairs"));
    }
    if valid.is_empty() {
        return Err(Error::invalid("no validation pairs"));
    }
    let valid = &valid[..config.valid_limit.unwrap_or(valid.len()).clamp(1, valid.len())];
    let probes = probe_specs(store);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = OptimizerState::new(store, config.adam);
    let mut grads = GradBuffer::new(store);
    let mut report = TrainReport::default();
    let limit = config.max_steps.unwrap_or(u64::MAX);
    let mut pending: Vec<f64> = Vec::new();
    let mut lr = 0.0;
    let mut snapshots = Snapshots(VecDeque::new());
    for epoch in 1..=config.epochs {
        if report.steps >= limit {
            break;
        }
        let batches = make_batches(data, config.token_budget, rng.gen())?;
        for window in batches.chunks(config.grad_accum_steps) {
            if report.steps >= limit {
                break;
            }
            let j = report.steps;
            let specs = sample_distinct(store.config(), config.variant, config.n_sampled, &mut rng);
            let objective = match config.stage {
                1 => Objective::Joint,
                2 => Objective::Distill {
                    lambda: lambda2(j, config.lambda2_threshold),
                },
                _ => Objective::Distill { lambda: config.lambda3 },
            };
            let loss = window_gradients(
                store,
                window,
                &specs,
                objective,
                config.label_smoothing,
                &mut grads,
                &mut rng,
            )?;
            if !loss.is_finite() {
                return Err(Error::invalid(format!("non-finite loss at step {}", j + 1)));
            }
            lr = lr_at(j + 1, config.max_lr, config.warmup_iters);
            adam_step(&mut opt, store, &grads, lr)?;
            pending.push(loss);
            report.steps += 1;
            if config.valid_every.is_some_and(|k| report.steps % k == 0) {
                record(store, &probes, valid, config.stage, epoch, lr, &mut pending, &mut report, &mut log)?;
            }
            if config.snapshot_every.is_some_and(|k| report.steps % k == 0) {
                snapshots.push(store, config.average_last);
            }
        }
        if !pending.is_empty() {
            record(store, &probes, valid, config.stage, epoch, lr, &mut pending, &mut report, &mut log)?;
        }
        if config.snapshot_every.is_none() {
            snapshots.push(store, config.average_last);
        }
    }
    if config.average_last > 1 && snapshots.0.len() > 1 {
        let last = snapshots.0.back().expect("non-empty");
        if store.params() != last.params() {
            // stopped between snapshots: the final weights count as one
            snapshots.push(store, config.average_last);
        }
        let kept: Vec<ParameterStore> = snapshots.0.into_iter().collect();
        *store = average_stores(&kept)?;
        // re-scored under the averaged weights, same epoch and step
        let (epoch, loss) = report.records.last().map_or((0, f64::NAN), |r| (r.epoch, r.train_loss));
        pending.push(loss);
        record(store, &probes, valid, config.stage, epoch, lr, &mut pending, &mut report, &mut log)?;
    }
    Ok(report)
}

/// The most recent `keep` stores.
struct Snapshots(VecDeque<ParameterStore>);

impl Snapshots {
    fn push(&mut self, store: &ParameterStore, keep: usize) {
        if keep < 2 {
            return;
        }
        if self.0.len() == keep {
            self.0.pop_front();
        }
        self.0.push_back(store.clone());
    }
}

#[allow(clippy::too_many_arguments)]
fn record(
    store: &ParameterStore,
    probes: &[WidthSpec],
    valid: &[Pair],
    stage: u8,
    epoch: usize,
    lr: f64,
    pending: &mut Vec<f64>,
    report: &mut TrainReport,
    log: &mut Option<&mut dyn Write>,
) -> Result<()> {
    let record = EpochRecord {
        stage,
        epoch,
        step: report.steps,
        lr,
        train_loss: pending.iter().sum::<f64>() / pending.len() as f64,
        metrics: validate_specs(store, probes, valid)?,
    };
    pending.clear();
    if let Some(out) = log.as_deref_mut() {
        for line in record.csv_lines() {
            writeln!(out, "{line}")?;
        }
        out.flush()?;
    }
    report.records.push(record);
    Ok(())
}
