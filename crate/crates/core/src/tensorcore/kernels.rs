//! Raw slice kernels shared by the forward and backward passes.

use super::tensor::{split_axis, strides};

/// `out[m×n] += op(a)[m×k] · op(b)[k×n]` where `op` optionally transposes.
///
/// `a` is stored as `m×k` (or `k×m` when `ta`), `b` as `k×n` (or `n×k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc(
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    out: &mut [f64],
) {
    if tb && !ta && m < DOT_ROWS {
        // Few rows: row dots beat materializing the transpose of `b`.
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            for (j, o) in out[i * n..(i + 1) * n].iter_mut().enumerate() {
                *o += dot(a_row, &b[j * k..(j + 1) * k]);
            }
        }
        return;
    }
    let a_rm;
    let a = if ta {
        a_rm = transpose2(a, k, m);
        &a_rm[..]
    } else {
        a
    };
    let b_rm;
    let b = if tb {
        b_rm = transpose2(b, n, k);
        &b_rm[..]
    } else {
        b
    };
    gemm_rm(a, b, m, k, n, out);
}

const TILE_R: usize = 4;
const TILE_C: usize = 8;

/// Row-major `out += a · b`. Each output element accumulates over `k` in
/// order, so tiling does not change the result.
fn gemm_rm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let (mt, nt) = (m - m % TILE_R, n - n % TILE_C);
    for i in (0..mt).step_by(TILE_R) {
        for j in (0..nt).step_by(TILE_C) {
            let mut acc = [[0.0f64; TILE_C]; TILE_R];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(i + r) * n + j..(i + r) * n + j + TILE_C]);
            }
            for p in 0..k {
                let b_seg = &b[p * n + j..p * n + j + TILE_C];
                for (r, row) in acc.iter_mut().enumerate() {
                    let aip = a[(i + r) * k + p];
                    for (o, &bv) in row.iter_mut().zip(b_seg) {
                        *o += aip * bv;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i + r) * n + j..(i + r) * n + j + TILE_C].copy_from_slice(row);
            }
        }
        gemm_naive(a, b, k, n, i..i + TILE_R, nt..n, out);
    }
    gemm_naive(a, b, k, n, mt..m, 0..n, out);
}

fn gemm_naive(
    a: &[f64],
    b: &[f64],
    k: usize,
    n: usize,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    out: &mut [f64],
) {
    if cols.is_empty() {
        return;
    }
    for i in rows {
        let out_row = &mut out[i * n + cols.start..i * n + cols.end];
        for p in 0..k {
            let aip = a[i * k + p];
            for (o, &bv) in out_row.iter_mut().zip(&b[p * n + cols.start..p * n + cols.end]) {
                *o += aip * bv;
            }
        }
    }
}

/// Below this many output rows `gemm_acc` skips transposing `b`.
const DOT_ROWS: usize = 16;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Transposes a row-major `rows×cols` matrix.
pub(crate) fn transpose2(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Visits every multi-index of `shape` in row-major order, passing the
/// linear offset into a tensor with the given (possibly zero) strides.
pub(crate) fn for_each_offset(shape: &[usize], src_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total: usize = shape.iter().product();
    if total == 0 {
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for lin in 0..total {
        f(lin, off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= src_strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

/// Strides of `src` as seen from the permuted output layout.
pub(crate) fn permuted_strides(src_shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let s = strides(src_shape);
    axes.iter().map(|&a| s[a]).collect()
}

/// Strides of a right-aligned broadcast source, zero on broadcast axes.
pub(crate) fn broadcast_strides(src_shape: &[usize], dst_shape: &[usize]) -> Vec<usize> {
    let s = strides(src_shape);
    let lead = dst_shape.len() - src_shape.len();
    (0..dst_shape.len())
        .map(|d| {
            if d < lead || src_shape[d - lead] == 1 {
                0
            } else {
                s[d - lead]
            }
        })
        .collect()
}

pub(crate) fn softmax_axis(x: &[f64], shape: &[usize], axis: usize, mask: Option<&[bool]>) -> Vec<f64> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let live = |j: usize| mask.is_none_or(|m| m[at(j)]);
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                if live(j) {
                    max = max.max(x[at(j)]);
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut denom = 0.0;
            for j in 0..n {
                if live(j) {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    denom += e;
                }
            }
            for j in 0..n {
                out[at(j)] /= denom;
            }
        }
    }
    out
}
