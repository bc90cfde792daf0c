/// First learning rate of the linear warmup ramp.
pub const WARMUP_INIT_LR: f64 = 5e-4;

/// Weight on the ground-truth term of the word-level distillation loss:
/// `1 - 0.5 j / t_j` before the threshold, `0.5` from it on.
pub fn lambda2(j: u64, t_j: u64) -> f64 {
    assert!(t_j > 0, "lambda2 threshold must be positive");
    if j < t_j {
        1.0 - 0.5 * j as f64 / t_j as f64
    } else {
        0.5
    }
}

/// Learning rate at iteration `j >= 1`: a linear ramp from
/// [`WARMUP_INIT_LR`] to `max_lr` over `warmup` iterations, then
/// `max_lr * sqrt(warmup) / sqrt(j)`.
pub fn lr_at(j: u64, max_lr: f64, warmup: u64) -> f64 {
    assert!(j >= 1 && warmup >= 1, "lr_at needs j >= 1 and warmup >= 1");
    if j < warmup {
        WARMUP_INIT_LR + (max_lr - WARMUP_INIT_LR) * j as f64 / warmup as f64
    } else {
        max_lr * (warmup as f64).sqrt() / (j as f64).sqrt()
    }
}
