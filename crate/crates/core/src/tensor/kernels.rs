//! Flat compute kernels behind the tape operations.
//!
//! Every kernel has a sequential implementation; with the `parallel` feature
//! a rayon variant splits work over *independent output elements* only, so
//! the parallel and sequential paths produce bitwise-identical results. The
//! `*_seq` / `*_par` pairs are public so the bench suite can compare them
//! directly.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use super::Element;

/// Work threshold below which the dispatching wrappers stay sequential.
pub const PAR_THRESHOLD: usize = 1 << 14;

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

/// Batched matrix product: `a` is `[batch, m, k]`, `b` is `[batch, k, n]`
/// when `b_batched`, else a shared `[k, n]`. Output is `[batch, m, n]`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_seq<E: Element>(
    a: &[E],
    b: &[E],
    out: &mut [E],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
) {
    for row in 0..batch * m {
        matmul_row(
            a,
            b,
            &mut out[row * n..(row + 1) * n],
            row,
            m,
            k,
            n,
            b_batched,
        );
    }
}

#[cfg(feature = "parallel")]
#[allow(clippy::too_many_arguments)]
pub fn matmul_par<E: Element>(
    a: &[E],
    b: &[E],
    out: &mut [E],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
) {
    debug_assert_eq!(out.len(), batch * m * n);
    out.par_chunks_mut(n)
        .enumerate()
        .for_each(|(row, out_row)| {
            matmul_row(a, b, out_row, row, m, k, n, b_batched);
        });
}

/// One output row `out[p, i, :]` with `row = p * m + i`. Accumulation runs in
/// ascending `k`, the same order in both kernel variants.
#[inline]
#[allow(clippy::too_many_arguments)]
fn matmul_row<E: Element>(
    a: &[E],
    b: &[E],
    out_row: &mut [E],
    row: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
) {
    let p = row / m;
    let a_row = &a[row * k..(row + 1) * k];
    let b_base = if b_batched { p * k * n } else { 0 };
    for v in out_row.iter_mut() {
        *v = E::zero();
    }
    for (kk, &aik) in a_row.iter().enumerate() {
        let b_row = &b[b_base + kk * n..b_base + (kk + 1) * n];
        for (o, &bkj) in out_row.iter_mut().zip(b_row.iter()) {
            *o = *o + aik * bkj;
        }
    }
}

pub fn matmul<E: Element>(
    a: &[E],
    b: &[E],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
) -> Vec<E> {
    let mut out = vec![E::zero(); batch * m * n];
    #[cfg(feature = "parallel")]
    {
        if batch * m * n * k > PAR_THRESHOLD {
            matmul_par(a, b, &mut out, batch, m, k, n, b_batched);
            return out;
        }
    }
    matmul_seq(a, b, &mut out, batch, m, k, n, b_batched);
    out
}

// ---------------------------------------------------------------------------
// softmax over contiguous rows
// ---------------------------------------------------------------------------

pub fn softmax_rows_seq<E: Element>(x: &[E], out: &mut [E], cols: usize) {
    for (xr, or) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        softmax_row(xr, or);
    }
}

#[cfg(feature = "parallel")]
pub fn softmax_rows_par<E: Element>(x: &[E], out: &mut [E], cols: usize) {
    x.par_chunks(cols)
        .zip(out.par_chunks_mut(cols))
        .for_each(|(xr, or)| softmax_row(xr, or));
}

/// Max-subtracted softmax of one row.
#[inline]
fn softmax_row<E: Element>(x: &[E], out: &mut [E]) {
    let mut max = x[0];
    for &v in &x[1..] {
        if v > max {
            max = v;
        }
    }
    let mut sum = E::zero();
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        let e = (v - max).exp();
        *o = e;
        sum = sum + e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

pub fn softmax_rows<E: Element>(x: &[E], cols: usize) -> Vec<E> {
    let mut out = vec![E::zero(); x.len()];
    #[cfg(feature = "parallel")]
    {
        if x.len() > PAR_THRESHOLD {
            softmax_rows_par(x, &mut out, cols);
            return out;
        }
    }
    softmax_rows_seq(x, &mut out, cols);
    out
}

// ---------------------------------------------------------------------------
// gather / scatter
// ---------------------------------------------------------------------------

/// `out[i] = x[map[i]]`.
pub fn gather_seq<E: Element>(x: &[E], map: &[usize], out: &mut [E]) {
    for (o, &src) in out.iter_mut().zip(map.iter()) {
        *o = x[src];
    }
}

#[cfg(feature = "parallel")]
pub fn gather_par<E: Element>(x: &[E], map: &[usize], out: &mut [E]) {
    out.par_iter_mut()
        .zip(map.par_iter())
        .for_each(|(o, &src)| {
            *o = x[src];
        });
}

pub fn gather<E: Element>(x: &[E], map: &[usize]) -> Vec<E> {
    let mut out = vec![E::zero(); map.len()];
    #[cfg(feature = "parallel")]
    {
        if map.len() > PAR_THRESHOLD {
            gather_par(x, map, &mut out);
            return out;
        }
    }
    gather_seq(x, map, &mut out);
    out
}

/// `out[map[i]] += g[i]`. Sequential: indices may repeat.
pub fn scatter_add<E: Element>(g: &[E], map: &[usize], out: &mut [E]) {
    for (&v, &dst) in g.iter().zip(map.iter()) {
        out[dst] = out[dst] + v;
    }
}

/// Scatter through a bijective map using its precomputed inverse:
/// `out[j] += g[inverse[j]]`. Safe to parallelize since every output element
/// is written exactly once.
pub fn scatter_bijective<E: Element>(g: &[E], inverse: &[usize], out: &mut [E]) {
    #[cfg(feature = "parallel")]
    {
        if inverse.len() > PAR_THRESHOLD {
            out.par_iter_mut()
                .zip(inverse.par_iter())
                .for_each(|(o, &src)| {
                    *o = *o + g[src];
                });
            return;
        }
    }
    for (o, &src) in out.iter_mut().zip(inverse.iter()) {
        *o = *o + g[src];
    }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

pub fn unary_map<E: Element>(x: &[E], f: impl Fn(E) -> E + Sync) -> Vec<E> {
    #[cfg(feature = "parallel")]
    {
        if x.len() > PAR_THRESHOLD {
            return x.par_iter().map(|&v| f(v)).collect();
        }
    }
    x.iter().map(|&v| f(v)).collect()
}

pub fn binary_zip<E: Element>(a: &[E], b: &[E], f: impl Fn(E, E) -> E + Sync) -> Vec<E> {
    debug_assert_eq!(a.len(), b.len());
    #[cfg(feature = "parallel")]
    {
        if a.len() > PAR_THRESHOLD {
            return a
                .par_iter()
                .zip(b.par_iter())
                .map(|(&x, &y)| f(x, y))
                .collect();
        }
    }
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}

/// Numerically stable logistic function, safe for large `|x|`.
#[inline]
pub fn sigmoid<E: Element>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

/// Numerically stable `log(1 + e^x)`.
#[inline]
pub fn softplus<E: Element>(x: E) -> E {
    let zero = E::zero();
    let pos = if x > zero { x } else { zero };
    pos + (E::one() + (-x.abs()).exp()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent triple-loop product in j-k order, used as the oracle.
    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a[i * k + kk] * b[kk * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_naive_oracle() {
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for &(m, k, n) in &[(3, 4, 5), (16, 16, 16), (1, 7, 2)] {
            let a: Vec<f64> = (0..m * k).map(|_| next()).collect();
            let b: Vec<f64> = (0..k * n).map(|_| next()).collect();
            let got = matmul(&a, &b, 1, m, k, n, false);
            let want = naive_matmul(&a, &b, m, k, n);
            for (g, w) in got.iter().zip(want.iter()) {
                assert!((g - w).abs() < 1e-12, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn matmul_batched_b() {
        // Two batch slices with their own right-hand sides.
        let a = [1.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 2.0]; // two 2x2: I, 2I
        let b = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let out = matmul(&a, &b, 2, 2, 2, 2, true);
        assert_eq!(&out[..4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(&out[4..], &[10.0, 12.0, 14.0, 16.0]);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_paths_are_bitwise_equal() {
        let n = 40usize;
        let a: Vec<f64> = (0..n * n).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..n * n).map(|i| (i as f64).cos()).collect();
        let mut seq = vec![0.0; n * n];
        let mut par = vec![0.0; n * n];
        matmul_seq(&a, &b, &mut seq, 1, n, n, n, false);
        matmul_par(&a, &b, &mut par, 1, n, n, n, false);
        assert_eq!(seq, par);

        let mut s2 = vec![0.0; a.len()];
        let mut p2 = vec![0.0; a.len()];
        softmax_rows_seq(&a, &mut s2, n);
        softmax_rows_par(&a, &mut p2, n);
        assert_eq!(s2, p2);
    }

    #[test]
    fn softmax_handles_large_inputs() {
        let out = softmax_rows(&[1000.0f64, 1000.0], 2);
        assert_eq!(out, vec![0.5, 0.5]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        let v = sigmoid(-745.0f64);
        assert!(v > 0.0 && v.is_finite());
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((sigmoid(745.0f64) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn scatter_bijective_matches_scatter_add() {
        let map = [2usize, 0, 3, 1];
        let mut inv = vec![0usize; 4];
        for (i, &m) in map.iter().enumerate() {
            inv[m] = i;
        }
        let g = [1.0, 2.0, 3.0, 4.0];
        let mut a = vec![0.0; 4];
        let mut b = vec![0.0; 4];
        scatter_add(&g, &map, &mut a);
        scatter_bijective(&g, &inv, &mut b);
        assert_eq!(a, b);
    }
}
