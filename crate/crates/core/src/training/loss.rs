use crate::data::Padded;
use crate::tensor::{kernels, Tape, Tensor, Var};
use crate::{Error, Result};

/// Replaces each one-hot row with `1 - eps` on the true class and
/// `eps / (N - 1)` elsewhere.
pub fn label_smooth(one_hot: &Tensor, eps: f64) -> Result<Tensor> {
    if one_hot.rank() != 2 || one_hot.last_dim() < 2 {
        return Err(Error::shape(format!("label_smooth needs [L, N>=2], got {:?}", one_hot.shape())));
    }
    check_eps(eps)?;
    let n = one_hot.last_dim();
    let mut ids = Vec::with_capacity(one_hot.outer_len());
    for (r, row) in one_hot.data().chunks_exact(n).enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid(format!("row {r} is not one-hot")));
        }
        ids.push(row.iter().position(|&v| v == 1.0).expect("counted one"));
    }
    Ok(smoothed_rows(&ids, n, eps))
}

fn check_eps(eps: f64) -> Result<()> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::invalid(format!("label smoothing must be in [0, 1), got {eps}")));
    }
    Ok(())
}

fn smoothed_rows(ids: &[usize], n: usize, eps: f64) -> Tensor {
    let off = eps / (n - 1) as f64;
    let mut data = vec![off; ids.len() * n];
    for (r, &t) in ids.iter().enumerate() {
        data[r * n + t] = 1.0 - eps;
    }
    Tensor::from_parts(vec![ids.len(), n], data)
}

/// Hard targets for a padded target batch: smoothed rows, a 0/1 weight per
/// position (0 at padding) and the normalizer shared by every term.
#[derive(Clone, Debug)]
pub struct Targets {
    pub dist: Tensor,
    pub weights: Vec<f64>,
    pub norm: f64,
}

impl Targets {
    /// `norm` is the number of supervised positions the loss is averaged
    /// over; with gradient accumulation it spans the whole window.
    pub fn new(tgt_out: &Padded, vocab: usize, eps: f64, norm: f64) -> Result<Self> {
        check_eps(eps)?;
        if vocab < 2 {
            return Err(Error::invalid("vocabulary needs at least two ids"));
        }
        if let Some(&t) = tgt_out.ids.iter().find(|&&t| t >= vocab) {
            return Err(Error::invalid(format!("target id {t} >= vocab size {vocab}")));
        }
        Ok(Targets {
            dist: smoothed_rows(&tgt_out.ids, vocab, eps),
            weights: tgt_out.mask(),
            norm,
        })
    }

    /// Averaged over the batch's own positions.
    pub fn for_batch(tgt_out: &Padded, vocab: usize, eps: f64) -> Result<Self> {
        Targets::new(tgt_out, vocab, eps, tgt_out.n_real() as f64)
    }
}

/// Softmax of the widest model's logits as a constant tensor: the teacher
/// receives no gradient through it.
pub fn soft_targets(tape: &Tape, widest_logits: Var) -> Tensor {
    let v = tape.value(widest_logits);
    let n = v.last_dim();
    let mut data = v.data().to_vec();
    for row in data.chunks_exact_mut(n) {
        kernels::softmax_in_place(row);
    }
    Tensor::from_parts(v.shape().to_vec(), data)
}

fn ce(tape: &mut Tape, logits: Var, target: &Tensor, t: &Targets) -> Result<Var> {
    tape.cross_entropy_weighted(logits, target, &t.weights, t.norm)
}

/// Widest CE plus every sampled sub-model's CE, all against hard targets.
pub fn stage1_loss(tape: &mut Tape, widest: Var, subs: &[Var], targets: &Targets) -> Result<Var> {
    let mut total = ce(tape, widest, &targets.dist, targets)?;
    for &s in subs {
        let term = ce(tape, s, &targets.dist, targets)?;
        total = tape.add(total, term)?;
    }
    Ok(total)
}

/// Widest CE against hard targets, plus for each sub-model
/// `lambda * CE(hard) + (1 - lambda) * CE(widest softmax)`.
///
/// Serves both distillation stages: word-level with `lambda = lambda2(j)`
/// on ground truth, sequence-level with `lambda = lambda3` on beam targets.
pub fn distill_loss(tape: &mut Tape, widest: Var, subs: &[Var], targets: &Targets, lambda: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("distillation weight must be in [0, 1], got {lambda}")));
    }
    let teacher = soft_targets(tape, widest);
    let mut total = ce(tape, widest, &targets.dist, targets)?;
    for &s in subs {
        let hard = ce(tape, s, &targets.dist, targets)?;
        let soft = ce(tape, s, &teacher, targets)?;
        let hard = tape.scale(hard, lambda);
        let soft = tape.scale(soft, 1.0 - lambda);
        let term = tape.add(hard, soft)?;
        total = tape.add(total, term)?;
    }
    Ok(total)
}
