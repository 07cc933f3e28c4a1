//! Row-wise numeric kernels.
//!
//! Every kernel computes each output row from the matching input row only,
//! with a fixed accumulation order. Running a kernel on one row therefore
//! gives bitwise the same result as running it on a batch that contains that
//! row, which lets incremental decoding reproduce full-sequence forwards.

/// `out[rows, n] = a[rows, k] · b[k, n]`.
pub fn matmul(a: &[f64], rows: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), rows * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; rows * n];
    for i in 0..rows {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[rows, n] = a[rows, k] · b[n, k]ᵀ`.
pub fn matmul_bt(a: &[f64], rows: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), rows * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0; rows * n];
    for i in 0..rows {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `out[m, n] = a[rows, m]ᵀ · g[rows, n]`, accumulated over rows in order.
pub fn matmul_at(a: &[f64], rows: usize, m: usize, g: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..rows {
        let arow = &a[i * m..(i + 1) * m];
        let grow = &g[i * n..(i + 1) * n];
        for (mm, &av) in arow.iter().enumerate() {
            let orow = &mut out[mm * n..(mm + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// RMS normalization of one row: `x / sqrt(mean(x²) + eps) * gain`.
/// Returns the reciprocal RMS for reuse by the backward rule.
pub fn rmsnorm_row(x: &[f64], gain: &[f64], eps: f64, out: &mut [f64]) -> f64 {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
    inv
}

pub fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Attention of one query head over `count` key/value rows.
///
/// `key(j)` and `value(j)` return the head slice of position `j`. Writes the
/// attended vector into `out` and the attention probabilities into `probs`.
pub fn attend_head<'a, K, V>(
    q: &[f64],
    count: usize,
    key: K,
    value: V,
    scale: f64,
    out: &mut [f64],
    probs: &mut [f64],
) where
    K: Fn(usize) -> &'a [f64],
    V: Fn(usize) -> &'a [f64],
{
    debug_assert!(probs.len() >= count);
    let mut max = f64::NEG_INFINITY;
    for (j, p) in probs.iter_mut().enumerate().take(count) {
        *p = dot(q, key(j)) * scale;
        max = max.max(*p);
    }
    let mut sum = 0.0;
    for p in probs.iter_mut().take(count) {
        *p = (*p - max).exp();
        sum += *p;
    }
    for p in probs.iter_mut().take(count) {
        *p /= sum;
    }
    out.iter_mut().for_each(|o| *o = 0.0);
    for (j, &p) in probs.iter().enumerate().take(count) {
        for (o, &v) in out.iter_mut().zip(value(j)) {
            *o += p * v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_rows_are_independent_of_batch() {
        let a: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..12).map(|i| (i as f64 * 0.11).cos()).collect();
        let full = matmul(&a, 3, 4, &b, 3);
        let row1 = matmul(&a[4..8], 1, 4, &b, 3);
        assert_eq!(&full[3..6], &row1[..]);
        let full_t = matmul_bt(&a, 3, 4, &b, 3);
        let row2 = matmul_bt(&a[8..12], 1, 4, &b, 3);
        assert_eq!(&full_t[6..9], &row2[..]);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
