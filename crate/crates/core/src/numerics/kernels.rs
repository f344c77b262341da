//! Plain-loop dense kernels. Reduction order is fixed so results are bitwise
//! reproducible for identical inputs.

const LANES: usize = 8;

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let xa = &a[c * LANES..c * LANES + LANES];
        let xb = &b[c * LANES..c * LANES + LANES];
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * LANES..a.len() {
        tail += a[i] * b[i];
    }
    let mut s = tail;
    for v in acc {
        s += v;
    }
    s
}

#[inline]
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

const MR: usize = 4;
const NR: usize = 16;

/// `c[i][j] += Σ_p a(i,p) · b[p][j]`, register-blocked. Each element accumulates
/// its terms one at a time in increasing `p`, exactly as a row-by-row loop would,
/// so the blocking never changes a result.
#[inline(always)]
fn gemm<A: Fn(usize, usize) -> f32>(a: A, b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    let row_range = |c: &mut [f32], i: usize, j0: usize| {
        let crow = &mut c[i * n + j0..(i + 1) * n];
        for p in 0..k {
            let av = a(i, p);
            for (cv, bv) in crow.iter_mut().zip(&b[p * n + j0..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    };
    let blocks = m / MR;
    let mut pack = vec![[0.0f32; MR]; blocks * k];
    for blk in 0..blocks {
        for p in 0..k {
            for r in 0..MR {
                pack[blk * k + p][r] = a(blk * MR + r, p);
            }
        }
    }
    // column strips outermost so each strip of `b` stays in cache across row blocks
    let mut j0 = 0;
    while j0 + NR <= n {
        for blk in 0..blocks {
            micro(&pack[blk * k..(blk + 1) * k], b, c, blk * MR, j0, n);
        }
        j0 += NR;
    }
    if j0 < n {
        for i in 0..blocks * MR {
            row_range(c, i, j0);
        }
    }
    for i in blocks * MR..m {
        row_range(c, i, 0);
    }
}

fn micro(pack: &[[f32; MR]], b: &[f32], c: &mut [f32], i0: usize, j0: usize, n: usize) {
    assert!(j0 + NR <= n && (i0 + MR) * n <= c.len() && pack.len() * n <= b.len());
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx") {
            // SAFETY: bounds asserted above; AVX presence checked at runtime.
            unsafe { micro_avx(pack, b, c, i0, j0, n) };
            return;
        }
    }
    let mut acc = [[0.0f32; NR]; MR];
    for (r, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]);
    }
    for (p, av) in pack.iter().enumerate() {
        let brow = &b[p * n + j0..p * n + j0 + NR];
        for r in 0..MR {
            for j in 0..NR {
                acc[r][j] += av[r] * brow[j];
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(row);
    }
}

/// Separate multiply and add (no fused multiply-add), so every element rounds
/// exactly as the scalar loops do.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn micro_avx(pack: &[[f32; MR]], b: &[f32], c: &mut [f32], i0: usize, j0: usize, n: usize) {
    use std::arch::x86_64::*;
    let cp = c.as_mut_ptr();
    let bp = b.as_ptr();
    let mut acc = [[_mm256_setzero_ps(); 2]; MR];
    for (r, row) in acc.iter_mut().enumerate() {
        row[0] = _mm256_loadu_ps(cp.add((i0 + r) * n + j0));
        row[1] = _mm256_loadu_ps(cp.add((i0 + r) * n + j0 + 8));
    }
    for (p, av) in pack.iter().enumerate() {
        let b0 = _mm256_loadu_ps(bp.add(p * n + j0));
        let b1 = _mm256_loadu_ps(bp.add(p * n + j0 + 8));
        for (r, row) in acc.iter_mut().enumerate() {
            let a = _mm256_set1_ps(av[r]);
            row[0] = _mm256_add_ps(row[0], _mm256_mul_ps(a, b0));
            row[1] = _mm256_add_ps(row[1], _mm256_mul_ps(a, b1));
        }
    }
    for (r, row) in acc.iter().enumerate() {
        _mm256_storeu_ps(cp.add((i0 + r) * n + j0), row[0]);
        _mm256_storeu_ps(cp.add((i0 + r) * n + j0 + 8), row[1]);
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    gemm(|i, p| a[i * k + p], b, c, m, k, n);
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cij) in crow.iter_mut().enumerate() {
            *cij += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn matmul_tn_acc(a: &[f32], b: &[f32], c: &mut [f32], k: usize, m: usize, n: usize) {
    gemm(|i, p| a[p * m + i], b, c, m, k, n);
}

/// Row-major transpose of a `rows×cols` matrix.
pub fn transpose(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        return;
    }
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// `ln Σ exp(x)` computed stably.
pub fn log_sum_exp(row: &[f32]) -> f32 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f32 = row.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

/// `tanh` through a single `exp`; libm's `tanhf` dominated the MLP cost.
#[inline]
fn tanh(u: f32) -> f32 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

#[inline]
pub fn gelu(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + tanh(u))
}

#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = tanh(u);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub const LN_EPS: f32 = 1e-5;

/// Row-wise layer norm; writes normalized values (pre-affine) into `xhat` and
/// returns per-row inverse std.
pub fn layer_norm_rows(x: &[f32], cols: usize, xhat: &mut [f32]) -> Vec<f32> {
    let rows = x.len() / cols;
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let xs = &x[r * cols..(r + 1) * cols];
        let mean = xs.iter().sum::<f32>() / cols as f32;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
        let is = 1.0 / (var + LN_EPS).sqrt();
        for (o, v) in xhat[r * cols..(r + 1) * cols].iter_mut().zip(xs) {
            *o = (v - mean) * is;
        }
        inv_std.push(is);
    }
    inv_std
}
