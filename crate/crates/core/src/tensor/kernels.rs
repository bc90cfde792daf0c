//! Slice-level numeric kernels shared by the tape and the tape-free
//! inference path.

/// `c = op(a) * op(b) + beta * c`, where `op(a)` is `m x k`, `op(b)` is
/// `k x n` and `c` is `m x n`, all row-major. `trans_a` means `a` is stored
/// as `k x m`; likewise for `trans_b`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: out length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the length asserts above guarantee every strided access
    // stays within the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Allocating `op(a) * op(b)`.
pub fn matmul(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a, trans_a, b, trans_b, &mut out, 0.0);
    out
}

/// Decomposes `shape` around `axis` into `(outer, axis_len, inner)`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along an axis described by `axis_split`.
pub fn softmax_axis(data: &mut [f64], outer: usize, len: usize, inner: usize) {
    if inner == 1 {
        for row in data.chunks_exact_mut(len) {
            softmax_in_place(row);
        }
        return;
    }
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let idx = |j: usize| base + j * inner + i;
            let max = (0..len).map(|j| data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..len {
                let e = (data[idx(j)] - max).exp();
                data[idx(j)] = e;
                sum += e;
            }
            for j in 0..len {
                data[idx(j)] /= sum;
            }
        }
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log(sum(exp(row)))`, shifted by the row max.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax_in_place(row: &mut [f64]) {
    let lse = log_sum_exp(row);
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// Row-wise layer normalization. Returns `(out, normalized, inv_std)` where
/// `normalized` is the pre-affine value, kept for the backward pass.
pub fn layer_norm_rows(
    x: &[f64],
    width: usize,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / width;
    let mut out = vec![0.0; x.len()];
    let mut normalized = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        inv_std[r] = rstd;
        for c in 0..width {
            let xh = (row[c] - mean) * rstd;
            normalized[r * width + c] = xh;
            out[r * width + c] = xh * gain[c] + bias[c];
        }
    }
    (out, normalized, inv_std)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
