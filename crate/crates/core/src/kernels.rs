//! Slice-level numeric kernels shared by the tensor API and the executor.
//!
//! All matrices are dense row-major with contiguous rows. Every output
//! element of [`gemm`] is accumulated from zero in ascending inner-index
//! order, whatever the tile it falls in, so a matrix-matrix product is
//! bitwise identical, column by column, to the matrix-vector products it
//! replaces.

use crate::tensor::Real;

const MR: usize = 6;
const NR: usize = 16;
/// Depth of one packed panel of `b`.
const KC: usize = 256;

/// `c = a · b` (or `c += a · b` when `accumulate`), `a` is `m×k`, `b` is `k×n`.
///
/// With `accumulate`, each element's running sum starts from its current
/// value in `c` rather than from zero.
pub fn gemm<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm: buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if !accumulate {
        c[..m * n].fill(T::zero());
    }
    #[cfg(target_arch = "x86_64")]
    {
        // SAFETY: each feature is detected at runtime before use. FMA is
        // never enabled, so every path performs the same IEEE operations in
        // the same order and results are identical across them.
        if std::is_x86_feature_detected!("avx512f") {
            unsafe { gemm_avx512(m, k, n, a, b, c) };
            return;
        }
        if std::is_x86_feature_detected!("avx") {
            unsafe { gemm_avx(m, k, n, a, b, c) };
            return;
        }
    }
    gemm_body(m, k, n, a, b, c, tile_any);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn gemm_avx512<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    if std::any::TypeId::of::<T>() == std::any::TypeId::of::<f64>() {
        // SAFETY: `T` is `f64`.
        let (a, b, c) = unsafe {
            (
                std::slice::from_raw_parts(a.as_ptr().cast::<f64>(), a.len()),
                std::slice::from_raw_parts(b.as_ptr().cast::<f64>(), b.len()),
                std::slice::from_raw_parts_mut(c.as_mut_ptr().cast::<f64>(), c.len()),
            )
        };
        gemm_body(m, k, n, a, b, c, |rows, n, block, panel, c, i0, j0, width| unsafe {
            avx512::tile_f64(rows, n, block, panel, c, i0, j0, width)
        });
    } else {
        gemm_body(m, k, n, a, b, c, tile_any);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn gemm_avx<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm_body(m, k, n, a, b, c, tile_any);
}

#[inline(always)]
fn gemm_body<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    tile_fn: impl Fn(usize, usize, &[T], &[T], &mut [T], usize, usize, usize),
) {
    if m < MR {
        // Too few rows to amortise packing: stream `b` once per row.
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
                axpy(av, &b[p * n..(p + 1) * n], crow);
            }
        }
        return;
    }
    let kc_max = KC.min(k);
    let mut apack = vec![T::zero(); m * kc_max];
    let mut bpack = vec![T::zero(); kc_max * NR];
    let tiles: Vec<(usize, usize)> = (0..m).step_by(MR).map(|i0| (i0, MR.min(m - i0))).collect();
    for k0 in (0..k).step_by(KC) {
        let kc = KC.min(k - k0);
        // Each tile of `r` rows becomes `kc` groups of `r` values, one per inner index.
        for &(i0, rows) in &tiles {
            let dst = &mut apack[i0 * kc..(i0 + rows) * kc];
            for r in 0..rows {
                let src = &a[(i0 + r) * k + k0..][..kc];
                for (p, &v) in src.iter().enumerate() {
                    dst[p * rows + r] = v;
                }
            }
        }
        for j0 in (0..n).step_by(NR) {
            let width = NR.min(n - j0);
            let panel = &mut bpack[..kc * NR];
            for (p, dst) in panel.chunks_exact_mut(NR).enumerate() {
                dst[..width].copy_from_slice(&b[(k0 + p) * n + j0..][..width]);
                dst[width..].fill(T::zero());
            }
            for &(i0, rows) in &tiles {
                tile_fn(rows, n, &apack[i0 * kc..(i0 + rows) * kc], panel, c, i0, j0, width);
            }
        }
    }
}

#[inline(always)]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y = *y + alpha * x;
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn tile_any<T: Real>(rows: usize, n: usize, block: &[T], panel: &[T], c: &mut [T], i0: usize, j0: usize, width: usize) {
    match rows {
        MR => tile::<T, MR>(n, block, panel, c, i0, j0, width),
        5 => tile::<T, 5>(n, block, panel, c, i0, j0, width),
        4 => tile::<T, 4>(n, block, panel, c, i0, j0, width),
        3 => tile::<T, 3>(n, block, panel, c, i0, j0, width),
        2 => tile::<T, 2>(n, block, panel, c, i0, j0, width),
        _ => tile::<T, 1>(n, block, panel, c, i0, j0, width),
    }
}

/// Updates rows `i0..i0+R`, columns `j0..j0+width` of `c` with one packed
/// block of `a` (`R` values per inner index) and one packed panel of `b`
/// (`NR` values per inner index).
#[inline(always)]
fn tile<T: Real, const R: usize>(n: usize, block: &[T], panel: &[T], c: &mut [T], i0: usize, j0: usize, width: usize) {
    let mut acc = [[T::zero(); NR]; R];
    for r in 0..R {
        acc[r][..width].copy_from_slice(&c[(i0 + r) * n + j0..][..width]);
    }
    for (p, brow) in panel.chunks_exact(NR).enumerate() {
        let brow: &[T; NR] = brow.try_into().unwrap();
        for r in 0..R {
            let av = block[p * R + r];
            for q in 0..NR {
                acc[r][q] = acc[r][q] + av * brow[q];
            }
        }
    }
    for r in 0..R {
        c[(i0 + r) * n + j0..][..width].copy_from_slice(&acc[r][..width]);
    }
}

#[cfg(target_arch = "x86_64")]
mod avx512 {
    use std::arch::x86_64::*;

    use super::{MR, NR};

    /// The f64 tile with explicit vectors: two registers per row of `c`.
    /// Multiplies then adds, like the generic tile, so results match it bit for bit.
    #[allow(clippy::too_many_arguments)]
    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn tile_f64(
        rows: usize,
        n: usize,
        block: &[f64],
        panel: &[f64],
        c: &mut [f64],
        i0: usize,
        j0: usize,
        width: usize,
    ) {
        match rows {
            MR => tile::<MR>(n, block, panel, c, i0, j0, width),
            5 => tile::<5>(n, block, panel, c, i0, j0, width),
            4 => tile::<4>(n, block, panel, c, i0, j0, width),
            3 => tile::<3>(n, block, panel, c, i0, j0, width),
            2 => tile::<2>(n, block, panel, c, i0, j0, width),
            _ => tile::<1>(n, block, panel, c, i0, j0, width),
        }
    }

    #[inline]
    #[target_feature(enable = "avx512f")]
    fn tile<const R: usize>(n: usize, block: &[f64], panel: &[f64], c: &mut [f64], i0: usize, j0: usize, width: usize) {
        let kc = panel.len() / NR;
        assert!(block.len() >= kc * R && width <= NR);
        for r in 0..R {
            assert!((i0 + r) * n + j0 + width <= c.len());
        }
        let mask = |lanes: usize| ((1u16 << lanes.min(8)) - 1) as __mmask8;
        let (lo, hi) = (mask(width), mask(width.saturating_sub(8)));
        // SAFETY: the asserts above bound every access; masked lanes are not touched.
        unsafe {
            let mut acc = [[_mm512_setzero_pd(); 2]; R];
            for (r, row) in acc.iter_mut().enumerate() {
                let at = c.as_ptr().add((i0 + r) * n + j0);
                row[0] = _mm512_maskz_loadu_pd(lo, at);
                row[1] = _mm512_maskz_loadu_pd(hi, at.add(8));
            }
            let (ap, bp) = (block.as_ptr(), panel.as_ptr());
            for p in 0..kc {
                let b0 = _mm512_loadu_pd(bp.add(p * NR));
                let b1 = _mm512_loadu_pd(bp.add(p * NR + 8));
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = _mm512_set1_pd(*ap.add(p * R + r));
                    row[0] = _mm512_add_pd(row[0], _mm512_mul_pd(av, b0));
                    row[1] = _mm512_add_pd(row[1], _mm512_mul_pd(av, b1));
                }
            }
            for (r, row) in acc.iter().enumerate() {
                let at = c.as_mut_ptr().add((i0 + r) * n + j0);
                _mm512_mask_storeu_pd(at, lo, row[0]);
                _mm512_mask_storeu_pd(at.add(8), hi, row[1]);
            }
        }
    }
}

/// Row-major transpose of an `rows×cols` matrix into `out` (`cols×rows`).
pub fn transpose<T: Real>(rows: usize, cols: usize, src: &[T], out: &mut [T]) {
    const B: usize = 32;
    for i0 in (0..rows).step_by(B) {
        for j0 in (0..cols).step_by(B) {
            for i in i0..(i0 + B).min(rows) {
                for j in j0..(j0 + B).min(cols) {
                    out[j * rows + i] = src[i * cols + j];
                }
            }
        }
    }
}

/// Componentwise operations. Unary ops ignore their second operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ElemOp {
    Tanh,
    Sigmoid,
    Log,
    Square,
    Add,
    Sub,
    Mul,
}

impl ElemOp {
    pub fn arity(self) -> usize {
        match self {
            ElemOp::Tanh | ElemOp::Sigmoid | ElemOp::Log | ElemOp::Square => 1,
            ElemOp::Add | ElemOp::Sub | ElemOp::Mul => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ElemOp::Tanh => "tanh",
            ElemOp::Sigmoid => "sigmoid",
            ElemOp::Log => "log",
            ElemOp::Square => "square",
            ElemOp::Add => "add",
            ElemOp::Sub => "sub",
            ElemOp::Mul => "mul",
        }
    }
}

pub fn unary<T: Real>(op: ElemOp, x: &[T], out: &mut [T]) {
    debug_assert_eq!(x.len(), out.len());
    match op {
        ElemOp::Tanh => out.iter_mut().zip(x).for_each(|(o, &v)| *o = v.tanh()),
        ElemOp::Sigmoid => out.iter_mut().zip(x).for_each(|(o, &v)| *o = sigmoid(v)),
        ElemOp::Log => out.iter_mut().zip(x).for_each(|(o, &v)| *o = v.ln()),
        ElemOp::Square => out.iter_mut().zip(x).for_each(|(o, &v)| *o = v * v),
        _ => unreachable!("binary op {op:?} passed to unary kernel"),
    }
}

pub fn binary<T: Real>(op: ElemOp, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert!(a.len() == out.len() && b.len() == out.len());
    let it = out.iter_mut().zip(a.iter().zip(b));
    match op {
        ElemOp::Add => it.for_each(|(o, (&x, &y))| *o = x + y),
        ElemOp::Sub => it.for_each(|(o, (&x, &y))| *o = x - y),
        ElemOp::Mul => it.for_each(|(o, (&x, &y))| *o = x * y),
        _ => unreachable!("unary op {op:?} passed to binary kernel"),
    }
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Accumulates the input gradient of a unary op: `dx += f'(x) * g`.
pub fn unary_backward<T: Real>(op: ElemOp, x: &[T], y: &[T], g: &[T], dx: &mut [T]) {
    let two = T::one() + T::one();
    for i in 0..dx.len() {
        let d = match op {
            ElemOp::Tanh => (T::one() - y[i] * y[i]) * g[i],
            ElemOp::Sigmoid => y[i] * (T::one() - y[i]) * g[i],
            ElemOp::Log => g[i] / x[i],
            ElemOp::Square => two * x[i] * g[i],
            _ => unreachable!(),
        };
        dx[i] = dx[i] + d;
    }
}

/// Accumulates operand gradients of a binary op. `which` selects the operand (0 or 1).
pub fn binary_backward<T: Real>(op: ElemOp, which: usize, a: &[T], b: &[T], g: &[T], d: &mut [T]) {
    match (op, which) {
        (ElemOp::Add, _) | (ElemOp::Sub, 0) => add_assign(d, g),
        (ElemOp::Sub, _) => d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d - g),
        (ElemOp::Mul, 0) => d.iter_mut().zip(g.iter().zip(b)).for_each(|(d, (&g, &y))| *d = *d + g * y),
        (ElemOp::Mul, _) => d.iter_mut().zip(g.iter().zip(a)).for_each(|(d, (&g, &x))| *d = *d + g * x),
        _ => unreachable!(),
    }
}

pub fn add_assign<T: Real>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

pub fn sum_sq_diff<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| {
        let d = x - y;
        acc + d * d
    })
}

/// `Σ_ij (d[i][j] * mask[j])^2` over a `rows×cols` matrix with one mask entry per column.
pub fn masked_sum_sq<T: Real>(rows: usize, cols: usize, d: &[T], mask: &[T]) -> T {
    let mut acc = T::zero();
    for i in 0..rows {
        for j in 0..cols {
            let v = d[i * cols + j] * mask[j];
            acc = acc + v * v;
        }
    }
    acc
}

/// Numerically stable `logsumexp(x) - x[label]`. Also writes the softmax
/// probabilities into `probs` when given.
pub fn neg_log_softmax<T: Real>(x: &[T], label: usize, probs: Option<&mut [T]>) -> T {
    let max = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let sum = x.iter().fold(T::zero(), |s, &v| s + (v - max).exp());
    if let Some(p) = probs {
        for (p, &v) in p.iter_mut().zip(x) {
            *p = (v - max).exp() / sum;
        }
    }
    sum.ln() + max - x[label]
}

pub fn all_finite<T: Real>(xs: &[T]) -> bool {
    xs.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    fn fill(len: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..len)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn gemm_is_bitwise_equal_to_sequential_dot_products() {
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 2), (4, 7, 8), (9, 13, 17), (5, 3, 1), (1, 6, 33), (6, 600, 11), (13, 300, 40), (8, 5, 23), (25, 70, 9), (12, 513, 16)] {
            let a = fill(m * k, 1);
            let b = fill(k * n, 2);
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, &a, &b, &mut c, false);
            assert_eq!(c, naive(m, k, n, &a, &b), "m={m} k={k} n={n}");
        }
    }

    #[test]
    fn gemm_accumulates() {
        let a = fill(6, 3);
        let b = fill(6, 4);
        let mut c = vec![1.0; 4];
        gemm(2, 3, 2, &a, &b, &mut c, true);
        let mut expect = vec![1.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                for p in 0..3 {
                    expect[i * 2 + j] += a[i * 3 + p] * b[p * 2 + j];
                }
            }
        }
        assert_eq!(c, expect);
    }

    #[test]
    fn transpose_round_trip() {
        let src = fill(7 * 45, 5);
        let mut t = vec![0.0; src.len()];
        let mut back = vec![0.0; src.len()];
        transpose(7, 45, &src, &mut t);
        transpose(45, 7, &t, &mut back);
        assert_eq!(src, back);
        assert_eq!(t[3 * 7 + 2], src[2 * 45 + 3]);
    }

    #[test]
    fn neg_log_softmax_uniform() {
        let x = [0.0f64; 10];
        let v = neg_log_softmax(&x, 3, None);
        assert!((v - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
    }
}
