use rand::Rng;

use super::kernels::{self, axis_split, gemm};
use super::Tensor;
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    /// Top-left `rows x cols` crop of an externally owned parameter.
    Param {
        key: usize,
        rows: usize,
        cols: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    AddBias(Var, Var),
    /// Adds a constant; the gradient passes through unchanged.
    Passthrough(Var),
    Scale(Var, f64),
    Mul(Var, Var),
    Relu(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        outer: usize,
        blocks: Vec<usize>,
    },
    Slice {
        x: Var,
        outer: usize,
        src_block: usize,
        offset: usize,
        block: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SplitHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        head_dim: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        head_dim: usize,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        target: Tensor,
        weights: Vec<f64>,
        norm: f64,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param { .. } => "param",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Passthrough(_) => "add_const",
            Op::Scale(..) => "scale",
            Op::Mul(..) => "mul",
            Op::Relu(_) => "relu",
            Op::Dropout { .. } => "dropout",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Transpose { .. } => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Gather { .. } => "gather",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::Sum(_) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede
/// it. A tape starts in training mode; [`Tape::inference`] builds one with
/// dropout disabled.
pub struct Tape {
    nodes: Vec<Node>,
    training: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            training: true,
        }
    }

    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            training: false,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if cfg!(debug_assertions) {
            assert!(
                value.is_finite(),
                "non-finite output from {} at node {}",
                op.name(),
                self.nodes.len()
            );
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a top-left `rows x cols` crop of `full` (a 1-D tensor is
    /// treated as a single row). Its gradient is reported in
    /// [`Gradients::params`] under `key`, sized to the crop.
    pub fn param(&mut self, key: usize, full: &Tensor, rows: usize, cols: usize) -> Result<Var> {
        let value = full.crop(rows, cols)?;
        Ok(self.push(value, Op::Param { key, rows, cols }, true))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) * op(b)` for 2-D inputs, with optional transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape(format!("matmul needs 2-D inputs, got {sa:?} and {sb:?}")));
        }
        let (m, k) = if trans_a { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::shape(format!("matmul inner dims {k} vs {k2}")));
        }
        let out = kernels::matmul(
            m,
            k,
            n,
            self.value(a).data(),
            trans_a,
            self.value(b).data(),
            trans_b,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// Batched `op(a[i]) * op(b[i])` over 3-D inputs `[batch, rows, cols]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape(format!("batch_matmul got {sa:?} and {sb:?}")));
        }
        let batch = sa[0];
        let (m, k) = if trans_a { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(Error::shape(format!("batch_matmul inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..(i + 1) * m * k],
                    trans_a,
                    &db[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![batch, m, n], out),
            Op::BatchMatMul {
                a,
                b,
                trans_a,
                trans_b,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "add {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b), rg))
    }

    /// Adds a 1-D `bias` to every row (last dimension) of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let width = self.value(x).last_dim();
        if self.shape(bias) != [width] {
            return Err(Error::shape(format!(
                "bias {:?} for rows of width {width}",
                self.shape(bias)
            )));
        }
        let b = self.value(bias).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % width])
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddBias(x, bias), rg))
    }

    /// Adds a constant tensor of identical shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::shape(format!(
                "add_const {:?} vs {:?}",
                self.shape(x),
                c.shape()
            )));
        }
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(a, b)| a + b)
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Passthrough(x), rg))
    }

    /// Adds an additive attention mask `[groups, q, k]` to scores laid out as
    /// `[groups * heads, q, k]`; every head of a group shares its mask.
    pub fn add_mask(&mut self, scores: Var, mask: &Tensor, heads: usize) -> Result<Var> {
        let (ss, ms) = (self.shape(scores), mask.shape());
        if ss.len() != 3 || ms.len() != 3 || ss[1..] != ms[1..] || ss[0] != ms[0] * heads {
            return Err(Error::shape(format!("mask {ms:?} for scores {ss:?} with {heads} heads")));
        }
        let block = ss[1] * ss[2];
        let m = mask.data();
        let out: Vec<f64> = self
            .value(scores)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let group = i / block / heads;
                v + m[group * block + i % block]
            })
            .collect();
        let shape = ss.to_vec();
        let rg = self.rg(scores);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Passthrough(scores), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, out), Op::Scale(x, factor), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "mul {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul(a, b), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, out), Op::Relu(x), rg)
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - rate)`. Returns
    /// `x` itself when `rate == 0` or the tape is in inference mode.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 || !self.training {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Dropout { x, mask }, rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("softmax axis {axis} for rank {}", shape.len())));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = self.value(x).data().to_vec();
        kernels::softmax_axis(&mut out, outer, len, inner);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Normalizes each row over the last dimension, then applies `gain` and
    /// `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let width = self.value(x).last_dim();
        if width < 2 {
            return Err(Error::shape("layer_norm needs a last dimension of at least 2"));
        }
        if self.shape(gain) != [width] || self.shape(bias) != [width] {
            return Err(Error::shape(format!(
                "layer_norm affine {:?}/{:?} for width {width}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let (out, normalized, inv_std) = kernels::layer_norm_rows(
            self.value(x).data(),
            width,
            self.value(gain).data(),
            self.value(bias).data(),
            eps,
        );
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 {
            return Err(Error::shape(format!("transpose needs 2-D, got {shape:?}")));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![cols, rows], out),
            Op::Transpose { x, rows, cols },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!("concat axis {axis} for rank {}", base.len())));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(format!("concat {s:?} with {base:?} on axis {axis}")));
            }
            axis_total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let blocks: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis] * inner).collect();
        let row: usize = blocks.iter().sum();
        let mut out = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (&p, &block) in parts.iter().zip(&blocks) {
                out.extend_from_slice(&self.value(p).data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = axis_total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                blocks,
            },
            rg,
        ))
    }

    /// `x[.., start..start + len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "slice {start}..{} on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, axis_len, inner) = axis_split(&shape, axis);
        let (src_block, block, offset) = (axis_len * inner, len * inner, start * inner);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * block);
        for o in 0..outer {
            out.extend_from_slice(&src[o * src_block + offset..o * src_block + offset + block]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Slice {
                x,
                outer,
                src_block,
                offset,
                block,
            },
            rg,
        ))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 || ids.is_empty() {
            return Err(Error::shape(format!("gather from {shape:?} with {} ids", ids.len())));
        }
        let (rows, cols) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!("row id {bad} out of range {rows}")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), cols], out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// `[batch * seq, heads * head_dim]` to `[batch * heads, seq, head_dim]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 || shape[0] % batch != 0 || shape[1] % heads != 0 {
            return Err(Error::shape(format!("split {shape:?} into {batch}x{heads} heads")));
        }
        let (seq, head_dim) = (shape[0] / batch, shape[1] / heads);
        let width = shape[1];
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for t in 0..seq {
                let row = &src[(b * seq + t) * width..(b * seq + t + 1) * width];
                for h in 0..heads {
                    let dst = ((b * heads + h) * seq + t) * head_dim;
                    out[dst..dst + head_dim].copy_from_slice(&row[h * head_dim..(h + 1) * head_dim]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![batch * heads, seq, head_dim], out),
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
                head_dim,
            },
            rg,
        ))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 3 || shape[0] % batch != 0 {
            return Err(Error::shape(format!("merge {shape:?} over batch {batch}")));
        }
        let (heads, seq, head_dim) = (shape[0] / batch, shape[1], shape[2]);
        let width = heads * head_dim;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..seq {
                    let s = ((b * heads + h) * seq + t) * head_dim;
                    let d = (b * seq + t) * width + h * head_dim;
                    out[d..d + head_dim].copy_from_slice(&src[s..s + head_dim]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![batch * seq, width], out),
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
                head_dim,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![1], vec![total]), Op::Sum(x), rg)
    }

    /// Mean over positions with `mask > 0` of `-sum(target * log_softmax(logits))`.
    pub fn cross_entropy(&mut self, logits: Var, target: &Tensor, mask: &[f64]) -> Result<Var> {
        let active: f64 = mask.iter().filter(|&&m| m > 0.0).count() as f64;
        if active == 0.0 {
            return Err(Error::invalid("cross_entropy over zero non-pad positions"));
        }
        let weights: Vec<f64> = mask.iter().map(|&m| if m > 0.0 { 1.0 } else { 0.0 }).collect();
        self.cross_entropy_weighted(logits, target, &weights, active)
    }

    /// `sum_r weights[r] * CE_r / norm`. Rows with zero weight are skipped;
    /// every weighted target row must be a distribution (tolerance 1e-6).
    pub fn cross_entropy_weighted(
        &mut self,
        logits: Var,
        target: &Tensor,
        weights: &[f64],
        norm: f64,
    ) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || target.shape() != shape || weights.len() != shape[0] {
            return Err(Error::shape(format!(
                "cross_entropy logits {shape:?}, target {:?}, {} weights",
                target.shape(),
                weights.len()
            )));
        }
        if !(norm > 0.0) {
            return Err(Error::invalid(format!("cross_entropy normalizer {norm}")));
        }
        let n = shape[1];
        let x = self.value(logits).data();
        let t = target.data();
        let mut probs = vec![0.0; x.len()];
        let mut total = 0.0;
        for (r, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let row = &x[r * n..(r + 1) * n];
            let trow = &t[r * n..(r + 1) * n];
            let mass: f64 = trow.iter().sum();
            if (mass - 1.0).abs() > 1e-6 || trow.iter().any(|&p| p < 0.0) {
                return Err(Error::invalid(format!(
                    "target row {r} is not a distribution (sums to {mass})"
                )));
            }
            let lse = kernels::log_sum_exp(row);
            let dot: f64 = row.iter().zip(trow).map(|(a, b)| a * b).sum();
            total += w * (lse * mass - dot);
            for (p, v) in probs[r * n..(r + 1) * n].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::from_parts(vec![1], vec![total / norm]),
            Op::CrossEntropy {
                logits,
                target: target.clone(),
                weights: weights.to_vec(),
                norm,
                probs,
            },
            rg,
        ))
    }

    /// Propagates d(loss)/d(node) for every node that requires a gradient
    /// and is reachable from `loss`. Fan-out accumulates.
    pub fn backward(&self, loss: Var) -> Result<Gradients<'_>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            self.backward_node(i, g, lower);
        }
        Ok(Gradients {
            grads,
            tape: self,
        })
    }

    fn grad_buf<'g>(&self, lower: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(lower[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backward_node(&self, i: usize, g: &[f64], lower: &mut [Option<Vec<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf | Op::Param { .. } => {}
            &Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
                m,
                k,
                n,
            } => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if let Some(ga) = self.grad_buf(lower, a) {
                    if trans_a {
                        gemm(k, n, m, vb, trans_b, g, true, ga, 1.0);
                    } else {
                        gemm(m, n, k, g, false, vb, !trans_b, ga, 1.0);
                    }
                }
                if let Some(gb) = self.grad_buf(lower, b) {
                    if trans_b {
                        gemm(n, m, k, g, true, va, trans_a, gb, 1.0);
                    } else {
                        gemm(k, m, n, va, !trans_a, g, false, gb, 1.0);
                    }
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                trans_a,
                trans_b,
                batch,
                m,
                k,
                n,
            } => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                let (sa, sb, sc) = (m * k, k * n, m * n);
                if let Some(ga) = self.grad_buf(lower, a) {
                    for i in 0..batch {
                        let gi = &g[i * sc..(i + 1) * sc];
                        let bi = &vb[i * sb..(i + 1) * sb];
                        let out = &mut ga[i * sa..(i + 1) * sa];
                        if trans_a {
                            gemm(k, n, m, bi, trans_b, gi, true, out, 1.0);
                        } else {
                            gemm(m, n, k, gi, false, bi, !trans_b, out, 1.0);
                        }
                    }
                }
                if let Some(gb) = self.grad_buf(lower, b) {
                    for i in 0..batch {
                        let gi = &g[i * sc..(i + 1) * sc];
                        let ai = &va[i * sa..(i + 1) * sa];
                        let out = &mut gb[i * sb..(i + 1) * sb];
                        if trans_b {
                            gemm(n, m, k, gi, true, ai, trans_a, out, 1.0);
                        } else {
                            gemm(k, m, n, ai, !trans_a, gi, false, out, 1.0);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.grad_buf(lower, v) {
                        add_into(gv, g);
                    }
                }
            }
            &Op::AddBias(x, bias) => {
                if let Some(gx) = self.grad_buf(lower, x) {
                    add_into(gx, g);
                }
                if let Some(gb) = self.grad_buf(lower, bias) {
                    let width = gb.len();
                    for row in g.chunks_exact(width) {
                        add_into(gb, row);
                    }
                }
            }
            &Op::Passthrough(x) | &Op::Reshape(x) => {
                if let Some(gx) = self.grad_buf(lower, x) {
                    add_into(gx, g);
                }
            }
            &Op::Scale(x, factor) => {
                if let Some(gx) = self.grad_buf(lower, x) {
                    for (d, s) in gx.iter_mut().zip(g) {
                        *d += s * factor;
                    }
                }
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if let Some(ga) = self.grad_buf(lower, a) {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(vb) {
                        *d += s * y;
                    }
                }
                if let Some(gb) = self.grad_buf(lower, b) {
                    for ((d, s), y) in gb.iter_mut().zip(g).zip(va) {
                        *d += s * y;
                    }
                }
            }
            &Op::Relu(x) => {
                let out = self.nodes[i].value.data();
                if let Some(gx) = self.grad_buf(lower, x) {
                    for ((d, s), y) in gx.iter_mut().zip(g).zip(out) {
                        if *y > 0.0 {
                            *d += s;
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.grad_buf(lower, *x) {
                    for ((d, s), m) in gx.iter_mut().zip(g).zip(mask) {
                        *d += s * m;
                    }
                }
            }
            &Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = self.nodes[i].value.data();
                if let Some(gx) = self.grad_buf(lower, x) {
                    for o in 0..outer {
                        for c in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + c;
                            let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..len {
                                gx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let width = self.value(*x).last_dim();
                let gv = self.value(*gain).data();
                if let Some(gx) = self.grad_buf(lower, *x) {
                    let wf = width as f64;
                    for (r, &rstd) in inv_std.iter().enumerate() {
                        let span = r * width..(r + 1) * width;
                        let (gr, xh) = (&g[span.clone()], &normalized[span.clone()]);
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..width {
                            let d = gr[c] * gv[c];
                            sum_d += d;
                            sum_dx += d * xh[c];
                        }
                        let out = &mut gx[span];
                        for c in 0..width {
                            let d = gr[c] * gv[c];
                            out[c] += rstd / wf * (wf * d - sum_d - xh[c] * sum_dx);
                        }
                    }
                }
                if let Some(gg) = self.grad_buf(lower, *gain) {
                    for (row, xh) in g.chunks_exact(width).zip(normalized.chunks_exact(width)) {
                        for c in 0..width {
                            gg[c] += row[c] * xh[c];
                        }
                    }
                }
                if let Some(gb) = self.grad_buf(lower, *bias) {
                    for row in g.chunks_exact(width) {
                        add_into(gb, row);
                    }
                }
            }
            &Op::Transpose { x, rows, cols } => {
                if let Some(gx) = self.grad_buf(lower, x) {
                    for r in 0..rows {
                        for c in 0..cols {
                            gx[r * cols + c] += g[c * rows + r];
                        }
                    }
                }
            }
            Op::Concat {
                parts,
                outer,
                blocks,
            } => {
                let row: usize = blocks.iter().sum();
                let mut offset = 0;
                for (&p, &block) in parts.iter().zip(blocks) {
                    if let Some(gp) = self.grad_buf(lower, p) {
                        for o in 0..*outer {
                            add_into(
                                &mut gp[o * block..(o + 1) * block],
                                &g[o * row + offset..o * row + offset + block],
                            );
                        }
                    }
                    offset += block;
                }
            }
            &Op::Slice {
                x,
                outer,
                src_block,
                offset,
                block,
            } => {
                if let Some(gx) = self.grad_buf(lower, x) {
                    for o in 0..outer {
                        add_into(
                            &mut gx[o * src_block + offset..o * src_block + offset + block],
                            &g[o * block..(o + 1) * block],
                        );
                    }
                }
            }
            Op::Gather { table, ids } => {
                let cols = self.value(*table).last_dim();
                if let Some(gt) = self.grad_buf(lower, *table) {
                    for (k, &id) in ids.iter().enumerate() {
                        add_into(
                            &mut gt[id * cols..(id + 1) * cols],
                            &g[k * cols..(k + 1) * cols],
                        );
                    }
                }
            }
            &Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
                head_dim,
            } => {
                if let Some(gx) = self.grad_buf(lower, x) {
                    let width = heads * head_dim;
                    for b in 0..batch {
                        for t in 0..seq {
                            for h in 0..heads {
                                let s = ((b * heads + h) * seq + t) * head_dim;
                                let d = (b * seq + t) * width + h * head_dim;
                                add_into(&mut gx[d..d + head_dim], &g[s..s + head_dim]);
                            }
                        }
                    }
                }
            }
            &Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
                head_dim,
            } => {
                if let Some(gx) = self.grad_buf(lower, x) {
                    let width = heads * head_dim;
                    for b in 0..batch {
                        for h in 0..heads {
                            for t in 0..seq {
                                let d = ((b * heads + h) * seq + t) * head_dim;
                                let s = (b * seq + t) * width + h * head_dim;
                                add_into(&mut gx[d..d + head_dim], &g[s..s + head_dim]);
                            }
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(gx) = self.grad_buf(lower, x) {
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                target,
                weights,
                norm,
                probs,
            } => {
                let n = self.value(*logits).last_dim();
                let t = target.data();
                if let Some(gl) = self.grad_buf(lower, *logits) {
                    for (r, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let span = r * n..(r + 1) * n;
                        let trow = &t[span.clone()];
                        let mass: f64 = trow.iter().sum();
                        let coef = g[0] * w / norm;
                        for ((d, p), q) in gl[span.clone()].iter_mut().zip(&probs[span]).zip(trow) {
                            *d += coef * (p * mass - q);
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<'t> {
    grads: Vec<Option<Vec<f64>>>,
    tape: &'t Tape,
}

/// Gradient of a cropped parameter: the top-left `rows x cols` block of the
/// parameter registered under `key`.
#[derive(Debug)]
pub struct ParamGrad<'g> {
    pub key: usize,
    pub rows: usize,
    pub cols: usize,
    pub grad: &'g [f64],
}

impl<'t> Gradients<'t> {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like the node's value.
    pub fn tensor(&self, v: Var) -> Option<Tensor> {
        self.get(v)
            .map(|g| Tensor::from_parts(self.tape.value(v).shape().to_vec(), g.to_vec()))
    }

    pub fn has(&self, v: Var) -> bool {
        self.get(v).is_some()
    }

    /// Gradients of every parameter crop recorded on the tape.
    pub fn params(&self) -> impl Iterator<Item = ParamGrad<'_>> + '_ {
        self.grads.iter().enumerate().filter_map(move |(i, g)| {
            let g = g.as_deref()?;
            match self.tape.nodes[i].op {
                Op::Param { key, rows, cols } => Some(ParamGrad {
                    key,
                    rows,
                    cols,
                    grad: g,
                }),
                _ => None,
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_trivial_cases() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let eye = tape.constant(Tensor::identity(2).unwrap());
        let out = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let row = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let col = tape.constant(t(&[2, 1], &[2.0, 3.0]));
        let out = tape.matmul(row, col).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0]);

        assert!(tape.matmul(row, row).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[1], &[42.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0]);
        let x = tape.constant(t(&[2], &[1000.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12);
        assert!(tape.softmax(x, 1).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let ones = tape.constant(Tensor::full(vec![4], 1.0).unwrap());
        let zeros = tape.constant(Tensor::zeros(vec![4]).unwrap());
        let x = tape.constant(Tensor::full(vec![1, 4], 7.5).unwrap());
        let y = tape.layer_norm(x, ones, zeros, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));

        let g2 = tape.constant(Tensor::full(vec![2], 1.0).unwrap());
        let b2 = tape.constant(Tensor::zeros(vec![2]).unwrap());
        let x = tape.constant(t(&[1, 2], &[1.0, -1.0]));
        let y = tape.layer_norm(x, g2, b2, 1e-300).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-12 && (v[1] + 1.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let width = 64;
        let data: Vec<f64> = (0..width).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let (gain, bias) = (1.7, -0.4);
        let g = tape.constant(Tensor::full(vec![width], gain).unwrap());
        let b = tape.constant(Tensor::full(vec![width], bias).unwrap());
        let x = tape.constant(t(&[1, width], &data));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let v = tape.value(y).data();
        let mean = v.iter().sum::<f64>() / width as f64;
        let std = (v.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / width as f64).sqrt();
        assert!((mean - bias).abs() < 1e-6);
        assert!((std - gain).abs() < 1e-6, "std {std}");
    }

    #[test]
    fn relu_and_dropout() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(tape.dropout(x, 0.0, &mut rng).unwrap(), x);
        assert!(tape.dropout(x, 1.0, &mut rng).is_err());
        assert!(tape.dropout(x, -0.1, &mut rng).is_err());

        let n = 1_000_000;
        let data: Vec<f64> = (0..n).map(|i| 1.0 + (i % 7) as f64).collect();
        let mean_in = data.iter().sum::<f64>() / n as f64;
        let big = tape.constant(t(&[n], &data));
        let dropped = tape.dropout(big, 0.3, &mut rng).unwrap();
        let mean_out = tape.value(dropped).data().iter().sum::<f64>() / n as f64;
        assert!(((mean_out - mean_in) / mean_in).abs() < 0.01);

        let mut eval = Tape::inference();
        let x = eval.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert_eq!(eval.dropout(x, 0.5, &mut rng).unwrap(), x);
    }

    #[test]
    fn cross_entropy_examples() {
        let n = 5;
        let mut tape = Tape::new();
        let mut one_hot = vec![0.0; n];
        one_hot[2] = 1.0;
        let target = t(&[1, n], &one_hot);
        let mut peaked = vec![0.0; n];
        peaked[2] = 200.0;
        let logits = tape.constant(t(&[1, n], &peaked));
        let loss = tape.cross_entropy(logits, &target, &[1.0]).unwrap();
        assert!(tape.value(loss).data()[0] < 1e-12);

        let uniform = tape.constant(Tensor::zeros(vec![1, n]).unwrap());
        let loss = tape.cross_entropy(uniform, &target, &[1.0]).unwrap();
        assert!((tape.value(loss).data()[0] - (n as f64).ln()).abs() < 1e-12);

        let raw = [0.3, -1.2, 2.0, 0.0, 0.7];
        let mut probs = raw.to_vec();
        kernels::softmax_in_place(&mut probs);
        let entropy: f64 = -probs.iter().map(|p| p * p.ln()).sum::<f64>();
        let logits = tape.constant(t(&[1, n], &raw));
        let loss = tape.cross_entropy(logits, &t(&[1, n], &probs), &[1.0]).unwrap();
        assert!((tape.value(loss).data()[0] - entropy).abs() < 1e-12);

        let bad = t(&[1, n], &[0.5; 5]);
        assert!(tape.cross_entropy(logits, &bad, &[1.0]).is_err());
        // masked rows are not validated and do not contribute
        let two = tape.constant(t(&[2, n], &[raw, raw].concat()));
        let mixed = t(&[2, n], &[one_hot.clone(), vec![0.0; n]].concat());
        assert!(tape.cross_entropy(two, &mixed, &[1.0, 0.0]).is_ok());
        assert!(tape.cross_entropy(two, &mixed, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn backward_simple_and_fan_out() {
        let mut tape = Tape::new();
        let xs = [1.5, -2.0, 0.25];
        let x = tape.variable(t(&[3], &xs));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);

        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        let expected: Vec<f64> = xs.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.get(x).unwrap(), expected.as_slice());

        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn grads_only_for_differentiable_ancestors() {
        let mut tape = Tape::new();
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let v = tape.variable(t(&[2], &[3.0, 4.0]));
        let unused = tape.variable(t(&[2], &[5.0, 6.0]));
        let p = tape.mul(c, v).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert!(g.has(v) && g.has(p) && g.has(s));
        assert!(!g.has(c) && !g.has(unused));
    }

    #[test]
    fn param_crop_reports_block_gradient() {
        let full = t(&[3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let mut tape = Tape::new();
        let w = tape.param(7, &full, 2, 2).unwrap();
        assert_eq!(tape.value(w).data(), &[1.0, 2.0, 4.0, 5.0]);
        let s = tape.sum(w);
        let g = tape.backward(s).unwrap();
        let grads: Vec<_> = g.params().collect();
        assert_eq!(grads.len(), 1);
        assert_eq!((grads[0].key, grads[0].rows, grads[0].cols), (7, 2, 2));
        assert!(tape.param(0, &full, 4, 1).is_err());
    }
}
