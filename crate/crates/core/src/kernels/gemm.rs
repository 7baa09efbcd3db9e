//! Row-major matrix products. The summation order of every output element
//! depends only on the shapes, so blocking and threading never change bits.

use crate::par;
use crate::real::Real;

const COL_BLOCK: usize = 512;
const ROWS_PER_TASK: usize = 8;
/// Below this output width `gemm` switches to dot products over a transposed `b`.
const NARROW_N: usize = 32;

/// `c[m×n] (+)= a[m×k] · b[k×n]`
pub fn gemm<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !accumulate {
        c.iter_mut().for_each(|v| *v = T::zero());
    }
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    if n < NARROW_N && k >= NARROW_N {
        let mut bt = vec![T::zero(); n * k];
        for (kk, row) in b.chunks_exact(n).enumerate() {
            for (j, &v) in row.iter().enumerate() {
                bt[j * k + kk] = v;
            }
        }
        gemm_nt(m, n, k, a, &bt, c, true);
        return;
    }
    par::for_each_chunk_mut_sized(c, ROWS_PER_TASK * n, m * n * k, |chunk_idx, c_rows| {
        let row0 = chunk_idx * ROWS_PER_TASK;
        let mut j0 = 0;
        while j0 < n {
            let j1 = (j0 + COL_BLOCK).min(n);
            for (quad, c_quad) in c_rows.chunks_mut(4 * n).enumerate() {
                let i0 = row0 + 4 * quad;
                let rows = c_quad.len() / n;
                if rows == 4 {
                    let (r0, rest) = c_quad.split_at_mut(n);
                    let (r1, rest) = rest.split_at_mut(n);
                    let (r2, r3) = rest.split_at_mut(n);
                    let (r0, r1, r2, r3) = (&mut r0[j0..j1], &mut r1[j0..j1], &mut r2[j0..j1], &mut r3[j0..j1]);
                    for kk in 0..k {
                        let a0 = a[i0 * k + kk];
                        let a1 = a[(i0 + 1) * k + kk];
                        let a2 = a[(i0 + 2) * k + kk];
                        let a3 = a[(i0 + 3) * k + kk];
                        let b_seg = &b[kk * n + j0..kk * n + j1];
                        let len = b_seg.len();
                        let (r0, r1, r2, r3) = (&mut r0[..len], &mut r1[..len], &mut r2[..len], &mut r3[..len]);
                        for j in 0..len {
                            let bv = b_seg[j];
                            r0[j] += a0 * bv;
                            r1[j] += a1 * bv;
                            r2[j] += a2 * bv;
                            r3[j] += a3 * bv;
                        }
                    }
                } else {
                    for r in 0..rows {
                        let i = i0 + r;
                        let a_row = &a[i * k..(i + 1) * k];
                        let c_seg = &mut c_quad[r * n + j0..r * n + j1];
                        for (kk, &aik) in a_row.iter().enumerate() {
                            let b_seg = &b[kk * n + j0..kk * n + j1];
                            for (cv, &bv) in c_seg.iter_mut().zip(b_seg) {
                                *cv += aik * bv;
                            }
                        }
                    }
                }
            }
            j0 = j1;
        }
    });
}

/// `c[m×n] (+)= aᵀ · b` with `a` stored as `[k×m]` and `b` as `[k×n]`.
pub fn gemm_tn<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !accumulate {
        c.iter_mut().for_each(|v| *v = T::zero());
    }
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    if n < NARROW_N && k >= NARROW_N {
        let mut at = vec![T::zero(); m * k];
        for (kk, row) in a.chunks_exact(m).enumerate() {
            for (i, &v) in row.iter().enumerate() {
                at[i * k + kk] = v;
            }
        }
        let mut bt = vec![T::zero(); n * k];
        for (kk, row) in b.chunks_exact(n).enumerate() {
            for (j, &v) in row.iter().enumerate() {
                bt[j * k + kk] = v;
            }
        }
        gemm_nt(m, n, k, &at, &bt, c, true);
        return;
    }
    par::for_each_chunk_mut_sized(c, ROWS_PER_TASK * n, m * n * k, |chunk_idx, c_rows| {
        let row0 = chunk_idx * ROWS_PER_TASK;
        let rows = c_rows.len() / n;
        for r in 0..rows {
            let i = row0 + r;
            let c_row = &mut c_rows[r * n..(r + 1) * n];
            for kk in 0..k {
                let aki = a[kk * m + i];
                if aki == T::zero() {
                    continue;
                }
                let b_row = &b[kk * n..(kk + 1) * n];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += aki * bv;
                }
            }
        }
    });
}

/// `c[m×n] (+)= a · bᵀ` with `a` stored as `[m×k]` and `b` as `[n×k]`.
pub fn gemm_nt<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    par::for_each_chunk_mut_sized(c, ROWS_PER_TASK * n, m * n * k, |chunk_idx, c_rows| {
        let row0 = chunk_idx * ROWS_PER_TASK;
        let rows = c_rows.len() / n;
        for r in 0..rows {
            let a_row = &a[(row0 + r) * k..(row0 + r + 1) * k];
            for j in 0..n {
                let d = dot(a_row, &b[j * k..(j + 1) * k]);
                let cv = &mut c_rows[r * n + j];
                if accumulate {
                    *cv += d;
                } else {
                    *cv = d;
                }
            }
        }
    });
}

/// Eight-lane dot product; lane sums are combined in a fixed order.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}
