//! Plain loops shared by the graph ops and the graph-free inference path.
//!
//! Every kernel works one output row at a time with a fixed accumulation
//! order, so a row computed alone is bitwise equal to the same row computed
//! as part of a larger matrix.

use super::tensor::Real;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `out += x · w` for a row vector `x` (len k) and `w` (k × n).
#[inline]
pub fn vec_mat_acc<T: Real>(x: &[T], w: &[T], n: usize, out: &mut [T]) {
    debug_assert_eq!(w.len(), x.len() * n);
    debug_assert_eq!(out.len(), n);
    for (p, &xv) in x.iter().enumerate() {
        let w_row = &w[p * n..(p + 1) * n];
        for (o, &wv) in out.iter_mut().zip(w_row) {
            *o = *o + xv * wv;
        }
    }
}

/// `a (m × k) · b (k × n)`.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        vec_mat_acc(&a[i * k..(i + 1) * k], b, n, &mut out[i * n..(i + 1) * n]);
    }
    out
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

/// `a (m × k) · bᵀ` where `b` is stored as (n × k).
pub fn matmul_a_bt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `aᵀ · b` where `a` is (r × m) and `b` is (r × n); result is (m × n).
pub fn matmul_at_b<T: Real>(a: &[T], b: &[T], r: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for row in 0..r {
        let a_row = &a[row * m..(row + 1) * m];
        let b_row = &b[row * n..(row + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let o = &mut out[p * n..(p + 1) * n];
            for (ov, &bv) in o.iter_mut().zip(b_row) {
                *ov = *ov + av * bv;
            }
        }
    }
    out
}

pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Normalizes one row into `xhat` (zero mean, unit variance with the
/// population denominator) and returns the reciprocal standard deviation.
/// A constant row normalizes to exactly zero.
pub fn normalize_row<T: Real>(x: &[T], xhat: &mut [T]) -> T {
    let n = T::lit(x.len() as f64);
    let first = x[0];
    if x.iter().all(|&v| v == first) {
        xhat.iter_mut().for_each(|v| *v = T::zero());
        return T::one() / T::lit(LAYER_NORM_EPS).sqrt();
    }
    let mean = x.iter().copied().sum::<T>() / n;
    let mut var = T::zero();
    for &v in x {
        let d = v - mean;
        var = var + d * d;
    }
    var = var / n;
    let rstd = T::one() / (var + T::lit(LAYER_NORM_EPS)).sqrt();
    for (h, &v) in xhat.iter_mut().zip(x) {
        *h = (v - mean) * rstd;
    }
    rstd
}

pub fn layer_norm_row<T: Real>(x: &[T], gamma: &[T], beta: &[T], out: &mut [T]) {
    normalize_row(x, out);
    for ((o, &g), &b) in out.iter_mut().zip(gamma).zip(beta) {
        *o = *o * g + b;
    }
}

const GELU_C: f64 = 0.044_715;

/// tanh approximation used by the GPT-2 family.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    half * x * (T::one() + (k * (x + T::lit(GELU_C) * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let du = k * (T::one() + T::lit(3.0) * c * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// In-place softmax of one row. `-inf` entries get probability zero.
pub fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// `log Σ exp(row)`.
pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for &v in row {
        sum = sum + (v - max).exp();
    }
    max + sum.ln()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
