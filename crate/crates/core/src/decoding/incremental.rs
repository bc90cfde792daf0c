//! Tape-free decoder that caches self-attention keys and values per
//! hypothesis, so each step costs one position instead of a full re-run.

use rand::rngs::mock::StepRng;

use crate::data::{Padded, BOS};
use crate::model::forward::positional_table;
use crate::model::{AttentionIds, LinearIds, NormIds, SubModel};
use crate::tensor::{kernels, Tape, Tensor, LAYER_NORM_EPS};
use crate::Result;

struct Linear {
    w: Tensor,
    b: Vec<f64>,
}

impl Linear {
    fn load(sub: &SubModel<'_>, ids: LinearIds, d_in: usize, d_out: usize, bias: usize) -> Result<Self> {
        let store = sub.store();
        Ok(Linear {
            w: store.get(ids.weight).crop(d_in, d_out)?,
            b: store.get(ids.bias).crop(1, bias)?.into_vec(),
        })
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (k, n) = (self.w.shape()[0], self.w.shape()[1]);
        let m = x.len() / k;
        let mut out = kernels::matmul(m, k, n, x, false, self.w.data(), false);
        for row in out.chunks_exact_mut(n) {
            for (v, b) in row.iter_mut().zip(&self.b) {
                *v += b;
            }
        }
        out
    }
}

struct Norm {
    gain: Vec<f64>,
    bias: Vec<f64>,
}

impl Norm {
    fn load(sub: &SubModel<'_>, ids: NormIds) -> Result<Self> {
        let c = sub.io_width();
        Ok(Norm {
            gain: sub.store().get(ids.gain).crop(1, c)?.into_vec(),
            bias: sub.store().get(ids.bias).crop(1, c)?.into_vec(),
        })
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        kernels::layer_norm_rows(x, self.gain.len(), &self.gain, &self.bias, LAYER_NORM_EPS).0
    }
}

struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    width: usize,
}

impl Attention {
    fn load(sub: &SubModel<'_>, ids: AttentionIds, d: usize) -> Result<Self> {
        let c = sub.io_width();
        Ok(Attention {
            q: Linear::load(sub, ids.q, c, d, d)?,
            k: Linear::load(sub, ids.k, c, d, d)?,
            v: Linear::load(sub, ids.v, c, d, d)?,
            o: Linear::load(sub, ids.o, d, c, c)?,
            width: d,
        })
    }
}

struct Layer {
    self_attn: Attention,
    norm1: Norm,
    cross_attn: Attention,
    norm2: Norm,
    ffn1: Linear,
    ffn2: Linear,
    norm3: Norm,
}

/// Cropped decoder weights for one sub-model.
pub struct IncrementalDecoder<'s> {
    sub: SubModel<'s>,
    input_proj: Linear,
    output_proj: Linear,
    layers: Vec<Layer>,
    positions: Vec<f64>,
}

/// Encoder output for one source plus the per-layer cross-attention keys
/// and values derived from it.
pub struct SourceState {
    len: usize,
    cross: Vec<(Vec<f64>, Vec<f64>)>,
}

impl SourceState {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Self-attention keys and values of one partial hypothesis.
#[derive(Clone, Debug, Default)]
pub struct HypCache {
    steps: usize,
    kv: Vec<(Vec<f64>, Vec<f64>)>,
}

impl HypCache {
    pub fn steps(&self) -> usize {
        self.steps
    }
}

impl<'s> IncrementalDecoder<'s> {
    pub fn new(sub: &SubModel<'s>) -> Result<Self> {
        let cfg = sub.config();
        let (m, c, mult) = (cfg.max_width, sub.io_width(), cfg.ffn_multiplier);
        let layout = sub.store().layout();
        let layers = layout
            .decoder
            .iter()
            .zip(sub.spec().decoder_widths(cfg))
            .map(|(ids, &d)| {
                Ok(Layer {
                    self_attn: Attention::load(sub, ids.self_attn, d)?,
                    norm1: Norm::load(sub, ids.norm1)?,
                    cross_attn: Attention::load(sub, ids.cross_attn, d)?,
                    norm2: Norm::load(sub, ids.norm2)?,
                    ffn1: Linear::load(sub, ids.ffn1, c, mult * d, mult * d)?,
                    ffn2: Linear::load(sub, ids.ffn2, mult * d, c, c)?,
                    norm3: Norm::load(sub, ids.norm3)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(IncrementalDecoder {
            sub: sub.clone(),
            input_proj: Linear::load(sub, layout.input_proj, m, c, c)?,
            output_proj: Linear::load(sub, layout.output_proj, c, m, m)?,
            layers,
            positions: positional_table(cfg.max_seq_len, c),
        })
    }

    pub fn sub(&self) -> &SubModel<'s> {
        &self.sub
    }

    /// Longest hypothesis (in generated tokens) the position table allows.
    pub fn max_steps(&self) -> usize {
        self.sub.config().max_seq_len
    }

    /// Encodes a batch of sources in one pass.
    pub fn encode(&self, sources: &[&[usize]]) -> Result<Vec<SourceState>> {
        let padded = Padded::from_seqs(sources)?;
        let mut tape = Tape::inference();
        let enc = self.sub.encode(&mut tape, &padded, &mut StepRng::new(0, 0))?;
        let features = tape.value(enc.features).data();
        let c = self.sub.io_width();
        Ok((0..padded.rows)
            .map(|r| {
                let len = padded.lengths[r];
                let rows = &features[r * padded.width * c..(r * padded.width + len) * c];
                let cross = self
                    .layers
                    .iter()
                    .map(|l| (l.cross_attn.k.apply(rows), l.cross_attn.v.apply(rows)))
                    .collect();
                SourceState { len, cross }
            })
            .collect())
    }

    pub fn empty_cache(&self) -> HypCache {
        HypCache {
            steps: 0,
            kv: vec![(Vec::new(), Vec::new()); self.layers.len()],
        }
    }

    /// Feeds `tokens[i]` to hypothesis `i` (at position `caches[i].steps()`,
    /// reading source `sources[i]`) and returns next-token log-probabilities,
    /// one row of `N` per hypothesis.
    pub fn step(&self, sources: &[&SourceState], caches: &mut [HypCache], tokens: &[usize]) -> Result<Vec<f64>> {
        let n = tokens.len();
        assert!(sources.len() == n && caches.len() == n, "step: mismatched batch");
        let cfg = self.sub.config();
        let (m, c) = (cfg.max_width, self.sub.io_width());
        let emb = self.sub.store().get(self.sub.store().layout().embedding);
        let mut e = Vec::with_capacity(n * m);
        for (&t, cache) in tokens.iter().zip(caches.iter()) {
            if t >= cfg.vocab_size {
                return Err(crate::Error::invalid(format!("token id {t} >= vocab size {}", cfg.vocab_size)));
            }
            if cache.steps >= cfg.max_seq_len {
                return Err(crate::Error::invalid(format!(
                    "decoder position {} exceeds max_seq_len {}",
                    cache.steps, cfg.max_seq_len
                )));
            }
            e.extend_from_slice(&emb.data()[t * m..(t + 1) * m]);
        }
        let mut x = self.input_proj.apply(&e);
        let scale = (c as f64).sqrt();
        for (row, cache) in x.chunks_exact_mut(c).zip(caches.iter()) {
            let pos = &self.positions[cache.steps * c..(cache.steps + 1) * c];
            for (v, p) in row.iter_mut().zip(pos) {
                *v = *v * scale + p;
            }
        }
        let head_dim = cfg.head_dim;
        for (li, layer) in self.layers.iter().enumerate() {
            let a = &layer.self_attn;
            let d = a.width;
            let (q, k, v) = (a.q.apply(&x), a.k.apply(&x), a.v.apply(&x));
            let mut ctx = vec![0.0; n * d];
            for i in 0..n {
                let (kc, vc) = &mut caches[i].kv[li];
                kc.extend_from_slice(&k[i * d..(i + 1) * d]);
                vc.extend_from_slice(&v[i * d..(i + 1) * d]);
                attend(&q[i * d..(i + 1) * d], kc, vc, head_dim, &mut ctx[i * d..(i + 1) * d]);
            }
            x = layer.norm1.apply(&residual(&x, &a.o.apply(&ctx)));

            let a = &layer.cross_attn;
            let q = a.q.apply(&x);
            let mut ctx = vec![0.0; n * d];
            for i in 0..n {
                let (kc, vc) = &sources[i].cross[li];
                attend(&q[i * d..(i + 1) * d], kc, vc, head_dim, &mut ctx[i * d..(i + 1) * d]);
            }
            x = layer.norm2.apply(&residual(&x, &a.o.apply(&ctx)));

            let mut h = layer.ffn1.apply(&x);
            for v in h.iter_mut() {
                *v = v.max(0.0);
            }
            x = layer.norm3.apply(&residual(&x, &layer.ffn2.apply(&h)));
        }
        for cache in caches.iter_mut() {
            cache.steps += 1;
        }
        let out = self.output_proj.apply(&x);
        let mut logits = kernels::matmul(n, m, cfg.vocab_size, &out, false, emb.data(), true);
        for row in logits.chunks_exact_mut(cfg.vocab_size) {
            kernels::log_softmax_in_place(row);
        }
        Ok(logits)
    }

    /// First decoder input for every hypothesis.
    pub fn start_token(&self) -> usize {
        BOS
    }
}

fn residual(x: &[f64], y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(a, b)| a + b).collect()
}

/// Multi-head attention of one query row over cached keys/values laid out
/// `[t, D]`.
fn attend(q: &[f64], keys: &[f64], values: &[f64], head_dim: usize, out: &mut [f64]) {
    let d = q.len();
    let t = keys.len() / d;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut scores = vec![0.0; t];
    for h in (0..d).step_by(head_dim) {
        let qh = &q[h..h + head_dim];
        for (j, s) in scores.iter_mut().enumerate() {
            let kh = &keys[j * d + h..j * d + h + head_dim];
            *s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        kernels::softmax_in_place(&mut scores);
        let oh = &mut out[h..h + head_dim];
        for (j, &p) in scores.iter().enumerate() {
            for (o, v) in oh.iter_mut().zip(&values[j * d + h..j * d + h + head_dim]) {
                *o += p * v;
            }
        }
    }
}
