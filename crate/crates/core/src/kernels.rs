//! Hot data-parallel kernels with explicit sequential and rayon variants.
//!
//! The `*_seq` functions are always compiled; the `*_par` functions exist
//! when the `parallel` feature is enabled. The unsuffixed entry points
//! dispatch to the parallel path for large inputs and are what the rest of
//! the crate calls. Parallel variants split work per output element or per
//! output row, so both paths produce bit-identical results.

use std::collections::HashMap;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::scalar::Scalar;

/// Work threshold (multiply-accumulate count) below which the dispatching
/// kernels stay sequential.
const PAR_MIN_MACS: usize = 1 << 21;

// ── dense matrix multiply ─────────────────────────────────────────────

fn gemm_strides(trans: bool, rows: usize, cols: usize) -> (isize, isize) {
    // (row stride, col stride) of the logical rows x cols operand whose
    // buffer is row-major; `trans` means the buffer stores the transpose.
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

/// c := alpha * op(a) * op(b) + beta * c, where op(a) is m x k and op(b)
/// is k x n. Buffers are row-major; `trans_*` marks an operand whose
/// buffer holds the transposed layout.
#[allow(clippy::too_many_arguments)]
pub fn matmul_into_seq<T: Scalar>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "lhs buffer length");
    assert_eq!(b.len(), k * n, "rhs buffer length");
    assert_eq!(c.len(), m * n, "out buffer length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == T::zero() {
            c.fill(T::zero());
        } else {
            for v in c.iter_mut() {
                *v = *v * beta;
            }
        }
        return;
    }
    let (rsa, csa) = gemm_strides(trans_a, m, k);
    let (rsb, csb) = gemm_strides(trans_b, k, n);
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
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

/// Parallel variant of [`matmul_into_seq`]: output rows are split across
/// threads; each row's accumulation order is unchanged.
#[cfg(feature = "parallel")]
#[allow(clippy::too_many_arguments)]
pub fn matmul_into_par<T: Scalar>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "lhs buffer length");
    assert_eq!(b.len(), k * n, "rhs buffer length");
    assert_eq!(c.len(), m * n, "out buffer length");
    if m == 0 || n == 0 {
        return;
    }
    let threads = rayon::current_num_threads().max(1);
    let rows_per = m.div_ceil(threads).max(1);
    let (rsa, csa) = gemm_strides(trans_a, m, k);
    let (rsb, csb) = gemm_strides(trans_b, k, n);
    c.par_chunks_mut(rows_per * n)
        .enumerate()
        .for_each(|(chunk, c_chunk)| {
            let row0 = chunk * rows_per;
            let rows = c_chunk.len() / n;
            if k == 0 {
                if beta == T::zero() {
                    c_chunk.fill(T::zero());
                } else {
                    for v in c_chunk.iter_mut() {
                        *v = *v * beta;
                    }
                }
                return;
            }
            // Row i of op(A) starts rsa elements per row into the buffer.
            let a_off = row0 * rsa as usize;
            unsafe {
                T::gemm(
                    rows,
                    k,
                    n,
                    alpha,
                    a.as_ptr().add(a_off),
                    rsa,
                    csa,
                    b.as_ptr(),
                    rsb,
                    csb,
                    beta,
                    c_chunk.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        });
}

#[allow(clippy::too_many_arguments)]
pub fn matmul_into<T: Scalar>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_MIN_MACS && m >= 2 {
        matmul_into_par(trans_a, trans_b, m, k, n, alpha, a, b, beta, c);
        return;
    }
    matmul_into_seq(trans_a, trans_b, m, k, n, alpha, a, b, beta, c);
}

// ── pairwise squared distances ────────────────────────────────────────

#[inline]
fn sqdist3<T: Scalar>(p: &[T], q: &[T]) -> T {
    let dx = p[0] - q[0];
    let dy = p[1] - q[1];
    let dz = p[2] - q[2];
    dx * dx + dy * dy + dz * dz
}

fn sqdist_row<T: Scalar>(p: &[T], b: &[T], out: &mut [T]) {
    for (j, q) in b.chunks_exact(3).enumerate() {
        out[j] = sqdist3(p, q);
    }
}

/// Dense n x m matrix of squared Euclidean distances between two flat
/// [x y z ...] point buffers.
pub fn sqdist_matrix_into_seq<T: Scalar>(a: &[T], b: &[T], out: &mut [T]) {
    let m = b.len() / 3;
    for (i, p) in a.chunks_exact(3).enumerate() {
        sqdist_row(p, b, &mut out[i * m..(i + 1) * m]);
    }
}

#[cfg(feature = "parallel")]
pub fn sqdist_matrix_into_par<T: Scalar>(a: &[T], b: &[T], out: &mut [T]) {
    let m = b.len() / 3;
    out.par_chunks_mut(m)
        .zip(a.par_chunks_exact(3))
        .for_each(|(row, p)| sqdist_row(p, b, row));
}

pub fn sqdist_matrix_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T]) {
    let n = a.len() / 3;
    let m = b.len() / 3;
    assert_eq!(out.len(), n * m);
    #[cfg(feature = "parallel")]
    if n * m >= PAR_MIN_MACS / 4 && n >= 2 {
        sqdist_matrix_into_par(a, b, out);
        return;
    }
    sqdist_matrix_into_seq(a, b, out);
}

fn min_sqdist_one<T: Scalar>(p: &[T], b: &[T]) -> (T, usize) {
    let mut best = T::infinity();
    let mut arg = 0usize;
    for (j, q) in b.chunks_exact(3).enumerate() {
        let d = sqdist3(p, q);
        if d < best {
            best = d;
            arg = j;
        }
    }
    (best, arg)
}

/// For each point of `a`, the squared distance to (and index of) its
/// nearest point in `b`. Ties keep the lowest index.
pub fn min_sqdist_seq<T: Scalar>(a: &[T], b: &[T]) -> Vec<(T, usize)> {
    a.chunks_exact(3).map(|p| min_sqdist_one(p, b)).collect()
}

#[cfg(feature = "parallel")]
pub fn min_sqdist_par<T: Scalar>(a: &[T], b: &[T]) -> Vec<(T, usize)> {
    a.par_chunks_exact(3)
        .map(|p| min_sqdist_one(p, b))
        .collect()
}

pub fn min_sqdist<T: Scalar>(a: &[T], b: &[T]) -> Vec<(T, usize)> {
    let n = a.len() / 3;
    let m = b.len() / 3;
    #[cfg(feature = "parallel")]
    if n * m >= PAR_MIN_MACS / 8 && n >= 2 {
        return min_sqdist_par(a, b);
    }
    min_sqdist_seq(a, b)
}

// ── neighbor counting on a uniform grid ───────────────────────────────

type CellKey = (i32, i32, i32);

fn cell_of<T: Scalar>(p: &[T], inv_r: f64) -> CellKey {
    (
        (p[0].as_f64() * inv_r).floor() as i32,
        (p[1].as_f64() * inv_r).floor() as i32,
        (p[2].as_f64() * inv_r).floor() as i32,
    )
}

fn build_grid<T: Scalar>(points: &[T], inv_r: f64) -> HashMap<CellKey, Vec<u32>> {
    let mut grid: HashMap<CellKey, Vec<u32>> = HashMap::new();
    for (i, p) in points.chunks_exact(3).enumerate() {
        grid.entry(cell_of(p, inv_r)).or_default().push(i as u32);
    }
    grid
}

fn count_one<T: Scalar>(
    p: &[T],
    points: &[T],
    grid: &HashMap<CellKey, Vec<u32>>,
    inv_r: f64,
    r2: T,
) -> u32 {
    let (cx, cy, cz) = cell_of(p, inv_r);
    let mut count = 0u32;
    for dx in -1..=1 {
        for dy in -1..=1 {
            for dz in -1..=1 {
                if let Some(cell) = grid.get(&(cx + dx, cy + dy, cz + dz)) {
                    for &j in cell {
                        let q = &points[j as usize * 3..j as usize * 3 + 3];
                        if sqdist3(p, q) < r2 {
                            count += 1;
                        }
                    }
                }
            }
        }
    }
    count
}

/// Per-point count of neighbors strictly within radius `r`, the point
/// itself included. Cells of size `r` bound the search to 27 buckets.
pub fn neighbor_counts_seq<T: Scalar>(points: &[T], r: T) -> Vec<u32> {
    let inv_r = 1.0 / r.as_f64();
    let r2 = r * r;
    let grid = build_grid(points, inv_r);
    points
        .chunks_exact(3)
        .map(|p| count_one(p, points, &grid, inv_r, r2))
        .collect()
}

#[cfg(feature = "parallel")]
pub fn neighbor_counts_par<T: Scalar>(points: &[T], r: T) -> Vec<u32> {
    let inv_r = 1.0 / r.as_f64();
    let r2 = r * r;
    let grid = build_grid(points, inv_r);
    points
        .par_chunks_exact(3)
        .map(|p| count_one(p, points, &grid, inv_r, r2))
        .collect()
}

pub fn neighbor_counts<T: Scalar>(points: &[T], r: T) -> Vec<u32> {
    let n = points.len() / 3;
    #[cfg(feature = "parallel")]
    if n >= 4096 {
        return neighbor_counts_par(points, r);
    }
    neighbor_counts_seq(points, r)
}

// ── indexed map over independent work items ───────────────────────────

/// Applies `f` to every index in order-preserving fashion, in parallel when
/// the feature is on. Used for batch members, refinement pairs, and
/// resampling trials; results land in input order so downstream reductions
/// stay deterministic.
pub fn map_indexed<R, F>(count: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..count).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..count).map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(v: &[f64]) -> Vec<f64> {
        v.to_vec()
    }

    #[test]
    fn matmul_identity() {
        let eye = mat(&[1.0, 0.0, 0.0, 1.0]);
        let m = mat(&[3.0, -1.0, 2.0, 5.0]);
        let mut c = vec![0.0; 4];
        matmul_into_seq(false, false, 2, 2, 2, 1.0, &eye, &m, 0.0, &mut c);
        assert_eq!(c, m);
    }

    #[test]
    fn matmul_hand_product() {
        // [[1,2],[3,4]] x [[1],[1]] = [[3],[7]]
        let a = mat(&[1.0, 2.0, 3.0, 4.0]);
        let b = mat(&[1.0, 1.0]);
        let mut c = vec![0.0; 2];
        matmul_into_seq(false, false, 2, 2, 1, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_transposed_operands() {
        // a stored transposed: buffer holds A^T where A = [[1,2,3],[4,5,6]]
        let at = mat(&[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]); // 3x2 buffer
        let b = mat(&[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]); // 3x2
        let mut c = vec![0.0; 4];
        matmul_into_seq(true, false, 2, 3, 2, 1.0, &at, &b, 0.0, &mut c);
        assert_eq!(c, vec![4.0, 5.0, 10.0, 11.0]);

        // b stored transposed
        let a = mat(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]); // 2x3
        let bt = mat(&[1.0, 0.0, 1.0, 0.0, 1.0, 1.0]); // 2x3 buffer = B^T
        let mut c2 = vec![0.0; 4];
        matmul_into_seq(false, true, 2, 3, 2, 1.0, &a, &bt, 0.0, &mut c2);
        assert_eq!(c2, vec![4.0, 5.0, 10.0, 11.0]);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn matmul_par_matches_seq_bitwise() {
        let mut a = Vec::new();
        let mut b = Vec::new();
        let (m, k, n) = (67, 33, 41);
        for i in 0..m * k {
            a.push(((i * 2654435761usize) % 1000) as f64 / 997.0 - 0.5);
        }
        for i in 0..k * n {
            b.push(((i * 40503usize) % 1000) as f64 / 991.0 - 0.5);
        }
        let mut c_seq = vec![0.0; m * n];
        let mut c_par = vec![0.0; m * n];
        matmul_into_seq(false, false, m, k, n, 1.0, &a, &b, 0.0, &mut c_seq);
        matmul_into_par(false, false, m, k, n, 1.0, &a, &b, 0.0, &mut c_par);
        assert_eq!(c_seq, c_par);
    }

    #[test]
    fn sqdist_zero_diagonal() {
        let pts = mat(&[0.1, 0.2, 0.3, -1.0, 0.5, 2.0, 0.0, 0.0, 1.0]);
        let mut d = vec![0.0; 9];
        sqdist_matrix_into_seq(&pts, &pts, &mut d);
        for i in 0..3 {
            assert_eq!(d[i * 3 + i], 0.0);
        }
        // symmetry of the matrix for identical inputs
        assert_eq!(d[1], d[3]);
    }

    #[test]
    fn min_sqdist_ties_take_lowest_index() {
        let a = mat(&[0.0, 0.0, 0.0]);
        // two reference points at the same distance
        let b = mat(&[1.0, 0.0, 0.0, -1.0, 0.0, 0.0]);
        let got = min_sqdist_seq(&a, &b);
        assert_eq!(got[0].1, 0);
    }

    #[test]
    fn neighbor_counts_match_bruteforce() {
        let mut pts: Vec<f64> = Vec::new();
        let mut state = 0x12345678u64;
        for _ in 0..600 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            pts.push(((state >> 33) as f64 / (1u64 << 31) as f64) - 0.5);
        }
        let r = 0.07;
        let fast = neighbor_counts_seq(&pts, r);
        let n = pts.len() / 3;
        for i in 0..n {
            let p = &pts[i * 3..i * 3 + 3];
            let mut c = 0u32;
            for q in pts.chunks_exact(3) {
                if sqdist3(p, q) < r * r {
                    c += 1;
                }
            }
            assert_eq!(fast[i], c, "point {i}");
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_kernels_match_sequential() {
        let mut pts: Vec<f32> = Vec::new();
        let mut state = 0xdeadbeefu64;
        for _ in 0..900 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(7);
            pts.push((((state >> 33) as f32) / (1u64 << 31) as f32) - 0.5);
        }
        assert_eq!(neighbor_counts_seq(&pts, 0.1), neighbor_counts_par(&pts, 0.1));
        let a = &pts[..300];
        let b = &pts[300..];
        assert_eq!(min_sqdist_seq(a, b), min_sqdist_par(a, b));
        let (n, m) = (a.len() / 3, b.len() / 3);
        let mut d_seq = vec![0.0f32; n * m];
        let mut d_par = vec![0.0f32; n * m];
        sqdist_matrix_into_seq(a, b, &mut d_seq);
        sqdist_matrix_into_par(a, b, &mut d_par);
        assert_eq!(d_seq, d_par);
    }
}
