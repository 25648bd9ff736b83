//! Dense kernels shared by the tape ops.
//!
//! Every kernel produces each output element with a fixed summation order
//! that does not depend on how many rows are processed together. Batched and
//! single-sentence forwards are therefore bit-identical row for row.

use rayon::prelude::*;

use super::Scalar;

/// Multiply-adds below which work stays on the calling thread.
const PAR_WORK: usize = 1 << 18;
const ROW_BLOCK: usize = 4;

pub(crate) fn parallel_worthwhile(work: usize) -> bool {
    work >= PAR_WORK && rayon::current_num_threads() > 1
}

/// `out[m×n] = x[m×k] · w[k×n] (+ bias)`.
pub fn matmul<F: Scalar>(x: &[F], w: &[F], bias: Option<&[F]>, m: usize, k: usize, n: usize) -> Vec<F> {
    debug_assert_eq!(x.len(), m * k);
    debug_assert_eq!(w.len(), k * n);
    let mut out = vec![F::zero(); m * n];
    if m == 0 || n == 0 {
        return out;
    }
    let rows_per_task = ROW_BLOCK * 8;
    if parallel_worthwhile(m * k * n) {
        out.par_chunks_mut(rows_per_task * n)
            .enumerate()
            .for_each(|(t, chunk)| {
                let r0 = t * rows_per_task;
                let rows = chunk.len() / n;
                rows_kernel(&x[r0 * k..(r0 + rows) * k], w, bias, k, n, chunk);
            });
    } else {
        rows_kernel(x, w, bias, k, n, &mut out);
    }
    out
}

/// Output rows and columns held in registers by the micro-kernel.
const TILE_ROWS: usize = ROW_BLOCK;
const TILE_COLS: usize = 8;

fn rows_kernel<F: Scalar>(x: &[F], w: &[F], bias: Option<&[F]>, k: usize, n: usize, out: &mut [F]) {
    let m = out.len() / n;
    let full = n - n % TILE_COLS;
    for j0 in (0..full).step_by(TILE_COLS) {
        let mut i = 0;
        while i + TILE_ROWS <= m {
            tile::<F, TILE_ROWS>(x, w, bias, k, n, i, j0, out);
            i += TILE_ROWS;
        }
        while i < m {
            tile::<F, 1>(x, w, bias, k, n, i, j0, out);
            i += 1;
        }
    }
    for i in 0..m {
        for j in full..n {
            let mut acc = bias.map_or(F::zero(), |b| b[j]);
            for kk in 0..k {
                acc += x[i * k + kk] * w[kk * n + j];
            }
            out[i * n + j] = acc;
        }
    }
}

/// `R × TILE_COLS` block of the output starting at row `i`, column `j0`.
/// Each element accumulates `bias + Σ_kk x·w` in increasing `kk`.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn tile<F: Scalar, const R: usize>(
    x: &[F],
    w: &[F],
    bias: Option<&[F]>,
    k: usize,
    n: usize,
    i: usize,
    j0: usize,
    out: &mut [F],
) {
    let mut acc = [[F::zero(); TILE_COLS]; R];
    if let Some(b) = bias {
        for row in acc.iter_mut() {
            row.copy_from_slice(&b[j0..j0 + TILE_COLS]);
        }
    }
    let xs: [&[F]; R] = std::array::from_fn(|r| &x[(i + r) * k..(i + r + 1) * k]);
    for kk in 0..k {
        let wr: &[F; TILE_COLS] = w[kk * n + j0..kk * n + j0 + TILE_COLS].try_into().unwrap();
        for r in 0..R {
            let a = xs[r][kk];
            for c in 0..TILE_COLS {
                acc[r][c] += a * wr[c];
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        out[(i + r) * n + j0..(i + r) * n + j0 + TILE_COLS].copy_from_slice(row);
    }
}

pub fn transpose<F: Scalar>(x: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// Dot product with eight interleaved partial sums, combined in a fixed order.
#[inline]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = F::zero();
    for (&p, &q) in ra.iter().zip(rb) {
        tail += p * q;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += a · x`
#[inline]
pub fn axpy<F: Scalar>(a: F, x: &[F], y: &mut [F]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += a * v;
    }
}

pub fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = F::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub fn log_softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let sum: F = row.iter().map(|&v| (v - max).exp()).sum();
    let shift = max + sum.ln();
    for v in row.iter_mut() {
        *v -= shift;
    }
}

/// Sinusoidal position table with `len` rows of width `d`.
pub fn sinusoidal_positions<F: Scalar>(len: usize, d: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            out.push(F::from_f64_lossy(v));
        }
    }
    out
}
