//! Slice-level kernels shared by the forward and adjoint passes.
//!
//! Every reduction runs sequentially over its contraction index, so results
//! are bit-reproducible for identical inputs.

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
}

/// `out[k×n] += aᵀ · c` where `a` is `m×k` and `c` is `m×n`.
pub(crate) fn matmul_tn_acc(a: &[f64], c: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &c_ij) in out_row.iter_mut().zip(c_row) {
                *o += a_ip * c_ij;
            }
        }
    }
}

/// `out[m×k] += c · bᵀ` where `c` is `m×n` and `b` is `k×n`.
pub(crate) fn matmul_nt_acc(c: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    let bt = transpose(b, k, n);
    matmul_acc(c, &bt, out, m, n, k);
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// Numerically stable softmax over `extent` elements spaced `inner` apart.
pub(crate) fn softmax_strided(x: &[f64], out: &mut [f64], outer: usize, extent: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            let idx = |e: usize| base + e * inner;
            let max = (0..extent).map(|e| x[idx(e)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for e in 0..extent {
                let v = (x[idx(e)] - max).exp();
                out[idx(e)] = v;
                sum += v;
            }
            for e in 0..extent {
                out[idx(e)] /= sum;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

/// Exact derivative of [`gelu`].
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Row-wise log-sum-exp with max shift.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}
