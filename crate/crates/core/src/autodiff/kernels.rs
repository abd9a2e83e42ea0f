//! Slice-level numeric kernels shared by the tape's forward and backward
//! rules. Inner products and reductions accumulate in `f64`.

/// `a[m x k] * b[k x n]`.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.fill(0.0);
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let av = av as f64;
            let b_row = &b[p * n..(p + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(b_row) {
                *s += av * bv as f64;
            }
        }
        for (o, s) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = *s as f32;
        }
    }
    out
}

/// `a[m x k] * b^T` where `b` is stored as `[n x k]`.
pub fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(a_row, &b[j * k..(j + 1) * k]) as f32;
        }
    }
    out
}

/// `a^T * b` where `a` is `[m x k]` and `b` is `[m x n]`; result `[k x n]`.
pub fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut acc = vec![0.0f64; k * n];
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p] as f64;
            for (s, &bv) in acc[p * n..(p + 1) * n].iter_mut().zip(b_row) {
                *s += av * bv as f64;
            }
        }
    }
    acc.into_iter().map(|s| s as f32).collect()
}

/// Inner product with four fixed accumulation lanes.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            let idx = c * 4 + l;
            lanes[l] += a[idx] as f64 * b[idx] as f64;
        }
    }
    let mut tail = 0.0f64;
    for idx in chunks * 4..a.len() {
        tail += a[idx] as f64 * b[idx] as f64;
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

pub fn transpose(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

pub fn sum(x: &[f32]) -> f64 {
    x.iter().map(|&v| v as f64).sum()
}

/// Column-wise softmax of a `rows x cols` matrix, max-subtracted.
pub fn softmax_columns(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let (max, sums) = column_exp_stats(x, rows, cols);
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let idx = r * cols + c;
            out[idx] = (((x[idx] - max[c]) as f64).exp() / sums[c]) as f32;
        }
    }
    out
}

pub fn log_softmax_columns(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let (max, sums) = column_exp_stats(x, rows, cols);
    let log_norm: Vec<f64> = sums.iter().map(|s| s.ln()).collect();
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let idx = r * cols + c;
            out[idx] = ((x[idx] - max[c]) as f64 - log_norm[c]) as f32;
        }
    }
    out
}

/// Per-column max and sum of `exp(x - max)`, swept row by row.
fn column_exp_stats(x: &[f32], rows: usize, cols: usize) -> (Vec<f32>, Vec<f64>) {
    let mut max = vec![f32::NEG_INFINITY; cols];
    for r in 0..rows {
        for (m, &v) in max.iter_mut().zip(&x[r * cols..(r + 1) * cols]) {
            *m = m.max(v);
        }
    }
    let mut sums = vec![0.0f64; cols];
    for r in 0..rows {
        for (c, &v) in x[r * cols..(r + 1) * cols].iter().enumerate() {
            sums[c] += ((v - max[c]) as f64).exp();
        }
    }
    (max, sums)
}
