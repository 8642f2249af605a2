//! Dense row-major `f32` kernels shared by inference and training.

/// `c (m×n) = a (m×k) · b (k×n)`, overwriting `c`.
pub fn matmul(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    gemm(a, b, c, m, k, n, false, false, 0.0);
}

/// `c (m×n) += a (m×k) · b (k×n)`.
pub fn matmul_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    gemm(a, b, c, m, k, n, false, false, 1.0);
}

/// `c (m×n) += aᵀ · b` where `a` is stored `k×m` and `b` is `k×n`.
pub fn matmul_at_b_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    gemm(a, b, c, m, k, n, true, false, 1.0);
}

/// `c (m×n) = a · bᵀ` where `a` is `m×k` and `b` is stored `n×k`.
pub fn matmul_a_bt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    gemm(a, b, c, m, k, n, false, true, 0.0);
}

/// `c (m×n) += a · bᵀ` where `a` is `m×k` and `b` is stored `n×k`.
pub fn matmul_a_bt_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    gemm(a, b, c, m, k, n, false, true, 1.0);
}

#[allow(clippy::too_many_arguments)]
fn gemm(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize, trans_a: bool, trans_b: bool, beta: f32) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe in-bounds views of `a`, `b`, `c`
    // whose lengths were checked against the logical shapes.
    unsafe {
        matrixmultiply::sgemm(
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

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub const RMS_EPS: f32 = 1e-5;

/// Row-wise RMS normalisation with a learned gain. Returns the per-row
/// inverse RMS so training can reuse it in the backward pass.
pub fn rms_norm(x: &[f32], gain: &[f32], out: &mut [f32], dim: usize) -> Vec<f32> {
    let rows = x.len() / dim;
    let mut inv = Vec::with_capacity(rows);
    for (xr, yr) in x.chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
        let ms = xr.iter().map(|v| v * v).sum::<f32>() / dim as f32;
        let r = 1.0 / (ms + RMS_EPS).sqrt();
        for ((y, &v), &g) in yr.iter_mut().zip(xr).zip(gain) {
            *y = v * r * g;
        }
        inv.push(r);
    }
    inv
}

pub const ROPE_THETA: f32 = 10_000.0;

/// Rotary embedding on one head vector, half-split layout: element `i` pairs
/// with `i + d/2`. With odd `d` the last element passes through unrotated.
pub fn rope_in_place(v: &mut [f32], position: usize, inverse: bool) {
    let d = v.len();
    let half = d / 2;
    for i in 0..half {
        let freq = 1.0 / ROPE_THETA.powf((2 * i) as f32 / (2 * half) as f32);
        let (mut sin, cos) = (position as f32 * freq).sin_cos();
        if inverse {
            sin = -sin;
        }
        let a = v[i];
        let b = v[i + half];
        v[i] = a * cos - b * sin;
        v[i + half] = b * cos + a * sin;
    }
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        row.fill(0.0);
        return;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

/// Index of the largest element; ties resolve to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
