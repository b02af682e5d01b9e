//! Raw dense kernels on flat row-major slices.
//!
//! Every kernel accumulates each output element strictly in ascending order
//! of the contraction index, so results are bitwise identical to a naive
//! triple loop regardless of vectorization or row partitioning.

use rayon::prelude::*;

use super::Elem;

/// Work threshold (multiply-adds) below which kernels stay single-threaded.
const PAR_THRESHOLD: usize = 1 << 17;

/// Element count below which elementwise maps stay single-threaded.
const ELEMWISE_PAR: usize = 1 << 15;

/// Elementwise map, row-split across threads for large inputs. Each output
/// element depends only on its own input, so the partition cannot change
/// results.
pub fn par_map<E: Elem, F: Fn(E) -> E + Sync>(xs: &[E], f: F) -> Vec<E> {
    if xs.len() < ELEMWISE_PAR {
        return xs.iter().map(|&x| f(x)).collect();
    }
    let mut out = vec![E::zero(); xs.len()];
    let chunk = xs.len().div_ceil(rayon::current_num_threads().max(1));
    out.par_chunks_mut(chunk)
        .zip(xs.par_chunks(chunk))
        .for_each(|(o, x)| {
            for (oo, &xx) in o.iter_mut().zip(x.iter()) {
                *oo = f(xx);
            }
        });
    out
}

/// Elementwise binary map with the same partitioning contract as `par_map`.
pub fn par_zip_map<E: Elem, F: Fn(E, E) -> E + Sync>(a: &[E], b: &[E], f: F) -> Vec<E> {
    debug_assert_eq!(a.len(), b.len());
    if a.len() < ELEMWISE_PAR {
        return a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
    }
    let mut out = vec![E::zero(); a.len()];
    let chunk = a.len().div_ceil(rayon::current_num_threads().max(1));
    out.par_chunks_mut(chunk)
        .zip(a.par_chunks(chunk).zip(b.par_chunks(chunk)))
        .for_each(|(o, (xa, xb))| {
            for i in 0..o.len() {
                o[i] = f(xa[i], xb[i]);
            }
        });
    out
}

/// Run `body(row_index, out_row)` over the rows of a [rows, cols] buffer,
/// banded across threads. Rows are independent.
pub fn par_rows<E: Elem, F: Fn(usize, &mut [E]) + Sync>(
    out: &mut [E],
    cols: usize,
    body: F,
) {
    let rows = out.len() / cols.max(1);
    if out.len() < ELEMWISE_PAR || rows < 2 {
        for (r, row) in out.chunks_exact_mut(cols).enumerate() {
            body(r, row);
        }
        return;
    }
    let band = rows.div_ceil(rayon::current_num_threads().max(1));
    out.par_chunks_mut(band * cols)
        .enumerate()
        .for_each(|(bi, chunk)| {
            for (ii, row) in chunk.chunks_exact_mut(cols).enumerate() {
                body(bi * band + ii, row);
            }
        });
}

/// C[m,n] = A[m,k] · B[k,n]
///
/// Processes 4-row tiles so each B row loaded from cache feeds four output
/// rows; within every output element the contraction still runs in ascending
/// p order, exactly like the naive triple loop.
pub fn gemm_nn<E: Elem>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    const TILE: usize = 4;
    let tile_body = |i0: usize, tile: &mut [E]| {
        tile.fill(E::zero());
        let rows = tile.len() / n;
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            for r in 0..rows {
                let coeff = a[(i0 + r) * k + p];
                let out_row = &mut tile[r * n..(r + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                    *o = *o + coeff * bv;
                }
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        let band_rows = m.div_ceil(rayon::current_num_threads().max(1));
        out.par_chunks_mut(band_rows * n)
            .enumerate()
            .for_each(|(bi, band)| {
                for (ti, tile) in band.chunks_mut(TILE * n).enumerate() {
                    tile_body(bi * band_rows + ti * TILE, tile);
                }
            });
    } else {
        for (ti, tile) in out.chunks_mut(TILE * n).enumerate() {
            tile_body(ti * TILE, tile);
        }
    }
}

/// C[m,n] = Aᵀ · B where A is [k,m], B is [k,n]; contraction over the k rows.
pub fn gemm_tn<E: Elem>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    // Each thread owns a contiguous band of output rows i and walks p in order.
    let band_body = |i0: usize, band: &mut [E]| {
        band.fill(E::zero());
        let rows = band.len() / n;
        for p in 0..k {
            let a_row = &a[p * m..(p + 1) * m];
            let b_row = &b[p * n..(p + 1) * n];
            for ii in 0..rows {
                let coeff = a_row[i0 + ii];
                let out_row = &mut band[ii * n..(ii + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                    *o = *o + coeff * bv;
                }
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        let band_rows = m.div_ceil(rayon::current_num_threads().max(1));
        out.par_chunks_mut(band_rows * n)
            .enumerate()
            .for_each(|(bi, band)| band_body(bi * band_rows, band));
    } else {
        band_body(0, out);
    }
}

/// C[m,n] = A · Bᵀ where A is [m,k], B is [n,k]. Routed through a transpose
/// plus the axpy kernel: per-element accumulation order (ascending k) is
/// unchanged, so the result is still bitwise equal to the naive loop.
pub fn gemm_nt<E: Elem>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let bt = transpose(b, n, k);
    gemm_nn(a, &bt, out, m, k, n);
}

pub fn transpose<E: Elem>(a: &[E], rows: usize, cols: usize) -> Vec<E> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut out = vec![E::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Population standard deviation over all entries (divide by N).
pub fn population_std<E: Elem>(data: &[E]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let n = data.len() as f64;
    let mut sum = 0.0;
    for &v in data {
        sum += v.as_f64();
    }
    let mean = sum / n;
    let mut acc = 0.0;
    for &v in data {
        let d = v.as_f64() - mean;
        acc += d * d;
    }
    (acc / n).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive<E: Elem>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
        let mut out = vec![E::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = E::zero();
                for p in 0..k {
                    s = s + a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn gemm_variants_match_naive_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(m, k, n) in &[(1, 1, 1), (3, 4, 2), (16, 16, 16), (5, 7, 3), (130, 64, 33)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let expect = naive(&a, &b, m, k, n);

            let mut out = vec![0.0; m * n];
            gemm_nn(&a, &b, &mut out, m, k, n);
            assert_eq!(out, expect, "gemm_nn {m}x{k}x{n}");

            let at = transpose(&a, m, k);
            gemm_tn(&at, &b, &mut out, m, k, n);
            assert_eq!(out, expect, "gemm_tn {m}x{k}x{n}");

            let bt = transpose(&b, k, n);
            gemm_nt(&a, &bt, &mut out, m, k, n);
            assert_eq!(out, expect, "gemm_nt {m}x{k}x{n}");
        }
    }

    #[test]
    fn population_std_two_point() {
        // {+c, -c} in equal counts has std exactly c
        let c = 0.75;
        let w = vec![c, -c, c, -c];
        assert!((population_std(&w) - c).abs() < 1e-15);
    }
}
