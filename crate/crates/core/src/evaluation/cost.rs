use crate::model::{ModelConfig, WidthSpec};
use crate::Result;

/// Active scalars of a sub-model.
///
/// With projections: the full `N x M_max` embedding, the `M_max x C` input
/// projection (bias `C`), the `C x M_max` output projection (bias `M_max`)
/// and every layer at its crop sizes. Without projections the model embeds
/// straight into width `C` (`N x C`) and has no projection maps.
pub fn count_params(config: &ModelConfig, spec: &WidthSpec, include_projections: bool) -> Result<u64> {
    config.validate()?;
    spec.validate(config)?;
    let (n, m, c) = (config.vocab_size as u64, config.max_width as u64, spec.io_width as u64);
    let mult = config.ffn_multiplier as u64;
    let mut total = if include_projections {
        n * m + (m * c + c) + (c * m + m)
    } else {
        n * c
    };
    let attention = |d: u64| 3 * (c * d + d) + (d * c + c);
    let ffn = |d: u64| (c * mult * d + mult * d) + (mult * d * c + c);
    let norm = 2 * c;
    for &d in spec.encoder_widths(config) {
        total += attention(d as u64) + ffn(d as u64) + 2 * norm;
    }
    for &d in spec.decoder_widths(config) {
        total += 2 * attention(d as u64) + ffn(d as u64) + 3 * norm;
    }
    Ok(total)
}

/// Forward-pass FLOPs by component (one multiply-accumulate = 2 FLOPs,
/// elementwise work 1 FLOP per element) for one teacher-forced pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlopBreakdown {
    /// Linear maps inside encoder and decoder layers.
    pub layers: f64,
    /// Attention score and context products.
    pub attention: f64,
    /// Input and output projections.
    pub projections: f64,
    /// Output logits against the embedding.
    pub logits: f64,
    /// Softmax, layer norm, activations and residual adds.
    pub elementwise: f64,
}

impl FlopBreakdown {
    pub fn forward(&self) -> f64 {
        self.layers + self.attention + self.projections + self.logits + self.elementwise
    }

    /// Training-step FLOPs: forward plus a backward pass costing twice the
    /// forward.
    pub fn training_step(&self) -> f64 {
        3.0 * self.forward()
    }
}

pub fn flop_breakdown(config: &ModelConfig, spec: &WidthSpec, src_len: usize, tgt_len: usize) -> Result<FlopBreakdown> {
    config.validate()?;
    spec.validate(config)?;
    let (n, m, c) = (config.vocab_size as f64, config.max_width as f64, spec.io_width as f64);
    let mult = config.ffn_multiplier as f64;
    let (ls, lt) = (src_len as f64, tgt_len as f64);
    let heads = |d: f64| d / config.head_dim as f64;
    let mut b = FlopBreakdown {
        layers: 0.0,
        attention: 0.0,
        projections: 2.0 * (ls + lt) * m * c + 2.0 * lt * c * m,
        logits: 2.0 * lt * m * n,
        elementwise: 0.0,
    };
    for &d in spec.encoder_widths(config) {
        let d = d as f64;
        b.layers += 2.0 * ls * (4.0 * c * d + 2.0 * mult * d * c);
        b.attention += 2.0 * 2.0 * ls * ls * d;
        b.elementwise += heads(d) * ls * ls + ls * mult * d + 2.0 * (ls * c + 5.0 * ls * c);
    }
    for &d in spec.decoder_widths(config) {
        let d = d as f64;
        b.layers += 2.0 * lt * (8.0 * c * d + 2.0 * mult * d * c);
        b.attention += 2.0 * 2.0 * (lt * lt + lt * ls) * d;
        b.elementwise += heads(d) * (lt * lt + lt * ls) + lt * mult * d + 3.0 * (lt * c + 5.0 * lt * c);
    }
    b.elementwise += lt * n;
    Ok(b)
}

/// Training-step FLOPs of a sub-model at the given sequence lengths.
pub fn estimate_flops(config: &ModelConfig, spec: &WidthSpec, src_len: usize, tgt_len: usize) -> Result<f64> {
    Ok(flop_breakdown(config, spec, src_len, tgt_len)?.training_step())
}

/// Cost summary for one spec.
#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub spec: WidthSpec,
    pub params: u64,
    pub params_without_projections: u64,
    pub flops: f64,
}

impl CostReport {
    pub fn new(config: &ModelConfig, spec: &WidthSpec, src_len: usize, tgt_len: usize) -> Result<Self> {
        Ok(CostReport {
            spec: spec.clone(),
            params: count_params(config, spec, true)?,
            params_without_projections: count_params(config, spec, false)?,
            flops: estimate_flops(config, spec, src_len, tgt_len)?,
        })
    }
}
