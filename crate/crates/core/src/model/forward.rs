use rand::RngCore;

use super::store::{AttentionIds, LinearIds, NormIds};
use super::{ModelConfig, ParameterStore, WidthSpec};
use crate::data::{Batch, Padded};
use crate::tensor::{Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::{Error, Result};

/// Additive score for masked attention keys; `exp` of it underflows to
/// exactly zero.
pub(crate) const MASK_NEG: f64 = -1e9;

/// How a sub-model puts weights on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightSource {
    /// Top-left crops of the shared store; gradients come back as
    /// per-parameter blocks.
    Cropped,
    /// The full store tensors as plain tape variables. Widest spec only.
    Full,
}

/// A sub-Transformer: a width spec read through the shared store.
#[derive(Clone, Debug)]
pub struct SubModel<'s> {
    store: &'s ParameterStore,
    spec: WidthSpec,
    dropout: f64,
    source: WeightSource,
}

/// Encoder output for a padded source batch.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[rows * len, C]`
    pub features: Var,
    pub rows: usize,
    pub len: usize,
    pub lengths: Vec<usize>,
}

/// Validates `spec` against the store's config and returns a view of the
/// store with that shape.
pub fn materialize<'s>(store: &'s ParameterStore, spec: &WidthSpec) -> Result<SubModel<'s>> {
    let dropout = spec.dropout_rate(store.config())?;
    Ok(SubModel {
        store,
        spec: spec.clone(),
        dropout,
        source: WeightSource::Cropped,
    })
}

/// Sinusoidal position table, `len x width`, row-major.
pub(crate) fn positional_table(len: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * width];
    for pos in 0..len {
        for i in (0..width).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / width as f64);
            out[pos * width + i] = angle.sin();
            if i + 1 < width {
                out[pos * width + i + 1] = angle.cos();
            }
        }
    }
    out
}

fn attention_mask(rows: usize, q_len: usize, key_lengths: &[usize], k_len: usize, causal: bool) -> Tensor {
    let mut m = vec![0.0; rows * q_len * k_len];
    for b in 0..rows {
        for q in 0..q_len {
            for k in 0..k_len {
                if k >= key_lengths[b] || (causal && k > q) {
                    m[(b * q_len + q) * k_len + k] = MASK_NEG;
                }
            }
        }
    }
    Tensor::from_parts(vec![rows, q_len, k_len], m)
}

impl<'s> SubModel<'s> {
    pub fn with_source(mut self, source: WeightSource) -> Result<Self> {
        if source == WeightSource::Full && !self.spec.is_widest(self.config()) {
            return Err(Error::Spec(format!(
                "full weights only apply to the widest spec, not {}",
                self.spec
            )));
        }
        self.source = source;
        Ok(self)
    }

    pub fn store(&self) -> &'s ParameterStore {
        self.store
    }

    pub fn config(&self) -> &'s ModelConfig {
        self.store.config()
    }

    pub fn spec(&self) -> &WidthSpec {
        &self.spec
    }

    pub fn io_width(&self) -> usize {
        self.spec.io_width
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout
    }

    /// Attention heads at layer `layer` (encoder layers first).
    pub fn heads(&self, layer: usize) -> usize {
        self.spec.attn_widths[layer] / self.config().head_dim
    }

    fn weight(&self, tape: &mut Tape, id: usize, rows: usize, cols: usize) -> Result<Var> {
        let full = self.store.get(id);
        match self.source {
            WeightSource::Cropped => tape.param(id, full, rows, cols),
            WeightSource::Full => Ok(tape.variable(full.clone())),
        }
    }

    fn linear(&self, tape: &mut Tape, x: Var, ids: LinearIds, d_in: usize, d_out: usize, bias: usize) -> Result<Var> {
        let w = self.weight(tape, ids.weight, d_in, d_out)?;
        let b = self.weight(tape, ids.bias, 1, bias)?;
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }

    fn norm(&self, tape: &mut Tape, x: Var, ids: NormIds) -> Result<Var> {
        let c = self.spec.io_width;
        let g = self.weight(tape, ids.gain, 1, c)?;
        let b = self.weight(tape, ids.bias, 1, c)?;
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }

    /// Multi-head scaled dot-product attention at attention width `d`.
    /// `q_in` is `[rows * q_len, C]`, `kv_in` is `[rows * k_len, C]`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn attention(
        &self,
        tape: &mut Tape,
        q_in: Var,
        kv_in: Var,
        ids: AttentionIds,
        d: usize,
        rows: usize,
        mask: &Tensor,
    ) -> Result<Var> {
        let c = self.spec.io_width;
        let head_dim = self.config().head_dim;
        if d % head_dim != 0 {
            return Err(Error::Spec(format!("attention width {d} is not a multiple of {head_dim}")));
        }
        let heads = d / head_dim;
        let q = self.linear(tape, q_in, ids.q, c, d, d)?;
        let k = self.linear(tape, kv_in, ids.k, c, d, d)?;
        let v = self.linear(tape, kv_in, ids.v, c, d, d)?;
        let qh = tape.split_heads(q, rows, heads)?;
        let kh = tape.split_heads(k, rows, heads)?;
        let vh = tape.split_heads(v, rows, heads)?;
        let scores = tape.batch_matmul(qh, kh, false, true)?;
        let scores = tape.scale(scores, 1.0 / (head_dim as f64).sqrt());
        let scores = tape.add_mask(scores, mask, heads)?;
        let probs = tape.softmax(scores, 2)?;
        let ctx = tape.batch_matmul(probs, vh, false, false)?;
        let merged = tape.merge_heads(ctx, rows)?;
        self.linear(tape, merged, ids.o, d, c, c)
    }

    fn ffn(&self, tape: &mut Tape, x: Var, f1: LinearIds, f2: LinearIds, d: usize) -> Result<Var> {
        let c = self.spec.io_width;
        let inner = self.config().ffn_multiplier * d;
        let h = self.linear(tape, x, f1, c, inner, inner)?;
        let h = tape.relu(h);
        self.linear(tape, h, f2, inner, c, c)
    }

    /// Embedding lookup, input projection to width `C`, `sqrt(C)` scaling
    /// and sinusoidal positions. Returns `[rows * width, C]`.
    fn embed(&self, tape: &mut Tape, tokens: &Padded, rng: &mut dyn RngCore) -> Result<Var> {
        let cfg = self.config();
        if tokens.width > cfg.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.width, cfg.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.ids.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::invalid(format!("token id {bad} >= vocab size {}", cfg.vocab_size)));
        }
        let (m, c) = (cfg.max_width, self.spec.io_width);
        let l = self.store.layout();
        let table = self.weight(tape, l.embedding, cfg.vocab_size, m)?;
        let e = tape.gather_rows(table, &tokens.ids)?;
        let x = self.linear(tape, e, l.input_proj, m, c, c)?;
        let x = tape.scale(x, (c as f64).sqrt());
        let pos = positional_table(tokens.width, c);
        let mut tiled = Vec::with_capacity(tokens.rows * pos.len());
        for _ in 0..tokens.rows {
            tiled.extend_from_slice(&pos);
        }
        let x = tape.add_const(x, &Tensor::from_parts(vec![tokens.rows * tokens.width, c], tiled))?;
        tape.dropout(x, self.dropout, rng)
    }

    pub fn encode(&self, tape: &mut Tape, src: &Padded, rng: &mut dyn RngCore) -> Result<Encoded> {
        let cfg = self.config();
        let mask = attention_mask(src.rows, src.width, &src.lengths, src.width, false);
        let mut x = self.embed(tape, src, rng)?;
        for (layer, &d) in self.store.layout().encoder.iter().zip(self.spec.encoder_widths(cfg)) {
            let a = self.attention(tape, x, x, layer.self_attn, d, src.rows, &mask)?;
            let a = tape.dropout(a, self.dropout, rng)?;
            let sum = tape.add(x, a)?;
            x = self.norm(tape, sum, layer.norm1)?;
            let f = self.ffn(tape, x, layer.ffn1, layer.ffn2, d)?;
            let f = tape.dropout(f, self.dropout, rng)?;
            let sum = tape.add(x, f)?;
            x = self.norm(tape, sum, layer.norm2)?;
        }
        Ok(Encoded {
            features: x,
            rows: src.rows,
            len: src.width,
            lengths: src.lengths.clone(),
        })
    }

    /// Teacher-forced decoder pass; returns logits `[rows * width, N]`.
    pub fn decode(&self, tape: &mut Tape, enc: &Encoded, tgt_in: &Padded, rng: &mut dyn RngCore) -> Result<Var> {
        if tgt_in.rows != enc.rows {
            return Err(Error::shape(format!(
                "{} target rows for {} source rows",
                tgt_in.rows, enc.rows
            )));
        }
        let cfg = self.config();
        let l = self.store.layout();
        let self_mask = attention_mask(tgt_in.rows, tgt_in.width, &tgt_in.lengths, tgt_in.width, true);
        let cross_mask = attention_mask(tgt_in.rows, tgt_in.width, &enc.lengths, enc.len, false);
        let mut x = self.embed(tape, tgt_in, rng)?;
        for (layer, &d) in l.decoder.iter().zip(self.spec.decoder_widths(cfg)) {
            let a = self.attention(tape, x, x, layer.self_attn, d, tgt_in.rows, &self_mask)?;
            let a = tape.dropout(a, self.dropout, rng)?;
            let sum = tape.add(x, a)?;
            x = self.norm(tape, sum, layer.norm1)?;
            let a = self.attention(tape, x, enc.features, layer.cross_attn, d, tgt_in.rows, &cross_mask)?;
            let a = tape.dropout(a, self.dropout, rng)?;
            let sum = tape.add(x, a)?;
            x = self.norm(tape, sum, layer.norm2)?;
            let f = self.ffn(tape, x, layer.ffn1, layer.ffn2, d)?;
            let f = tape.dropout(f, self.dropout, rng)?;
            let sum = tape.add(x, f)?;
            x = self.norm(tape, sum, layer.norm3)?;
        }
        let (m, c) = (cfg.max_width, self.spec.io_width);
        let out = self.linear(tape, x, l.output_proj, c, m, m)?;
        let table = self.weight(tape, l.embedding, cfg.vocab_size, m)?;
        tape.matmul_t(out, table, false, true)
    }

    /// Encoder plus teacher-forced decoder over a batch.
    pub fn forward(&self, tape: &mut Tape, batch: &Batch, rng: &mut dyn RngCore) -> Result<Var> {
        let enc = self.encode(tape, &batch.src, rng)?;
        self.decode(tape, &enc, &batch.tgt_in, rng)
    }
}
