//! Dense row-major kernels shared by the encoder, fusion head and index.
//!
//! Matrices are plain `&[f64]` slices with explicit dimensions. Weight
//! matrices are stored `(in, out)` so a linear layer is `y = x · W + b`.

/// Dot product with four independent accumulators.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..chunks {
        let i = c * 4;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..n {
        tail += a[i] * b[i];
    }
    (s0 + s1) + (s2 + s3) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn add_assign(y: &mut [f64], x: &[f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += xi;
    }
}

pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// `out (rows × cols) = x (rows × inner) · w (inner × cols) + bias`
pub fn linear(x: &[f64], rows: usize, inner: usize, w: &[f64], bias: Option<&[f64]>, cols: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), rows * inner);
    debug_assert_eq!(w.len(), inner * cols);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let orow = &mut out[r * cols..(r + 1) * cols];
        if let Some(b) = bias {
            orow.copy_from_slice(b);
        }
        let xrow = &x[r * inner..(r + 1) * inner];
        for (i, &xv) in xrow.iter().enumerate() {
            if xv != 0.0 {
                axpy(xv, &w[i * cols..(i + 1) * cols], orow);
            }
        }
    }
    out
}

/// Backward of [`linear`]: accumulates `dw += xᵀ·g`, `db += Σ_rows g` and
/// returns `dx = g · wᵀ`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f64],
    rows: usize,
    inner: usize,
    w: &[f64],
    cols: usize,
    g: &[f64],
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) -> Vec<f64> {
    debug_assert_eq!(g.len(), rows * cols);
    let mut dx = vec![0.0; rows * inner];
    for r in 0..rows {
        let grow = &g[r * cols..(r + 1) * cols];
        let xrow = &x[r * inner..(r + 1) * inner];
        let dxrow = &mut dx[r * inner..(r + 1) * inner];
        for i in 0..inner {
            let wrow = &w[i * cols..(i + 1) * cols];
            dxrow[i] = dot(grow, wrow);
            let xv = xrow[i];
            if xv != 0.0 {
                axpy(xv, grow, &mut dw[i * cols..(i + 1) * cols]);
            }
        }
    }
    if let Some(db) = db {
        for r in 0..rows {
            add_assign(db, &g[r * cols..(r + 1) * cols]);
        }
    }
    dx
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Returns `x / ‖x‖` together with the norm. A zero vector stays zero.
pub fn l2_normalize(x: &[f64]) -> (Vec<f64>, f64) {
    let n = norm(x);
    if n == 0.0 {
        return (x.to_vec(), 0.0);
    }
    (x.iter().map(|v| v / n).collect(), n)
}

/// Gradient through `y = x / ‖x‖` given `y`, `‖x‖` and `dL/dy`.
pub fn l2_normalize_backward(y: &[f64], n: f64, gy: &[f64]) -> Vec<f64> {
    if n == 0.0 {
        return vec![0.0; y.len()];
    }
    let proj = dot(y, gy);
    y.iter().zip(gy).map(|(yi, gi)| (gi - yi * proj) / n).collect()
}

/// tanh-approximated GELU and its derivative.
#[inline]
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044_715 * x * x * x);
    let t = inner.tanh();
    let dinner = C * (1.0 + 3.0 * 0.044_715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}
