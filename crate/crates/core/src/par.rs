//! Data-parallel kernels with sequential fallbacks.
//!
//! The `parallel` feature (on by default) routes large matrix products, seed
//! sweeps, and kernel-matrix partial sums through rayon. Every parallel
//! region is organised so each output element is produced by exactly one
//! task using a fixed sequential inner loop, and partial results are combined
//! in index order. Results are therefore bit-identical to the sequential
//! fallback regardless of thread count — a property the test suite checks.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Problems smaller than this many multiply-adds are not worth a fork-join.
const PAR_MIN_FLOPS: usize = 1 << 17;

/// `out = a @ b` for row-major `a: [m, k]`, `b: [k, n]`, `out: [m, n]`.
///
/// Dispatches to the rayon kernel when built with the `parallel` feature and
/// the problem is large enough; otherwise runs sequentially.
pub fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    #[cfg(feature = "parallel")]
    {
        if m > 1 && m.saturating_mul(k).saturating_mul(n) >= PAR_MIN_FLOPS {
            matmul_into_par(a, b, out, m, k, n);
            return;
        }
    }
    matmul_into_seq(a, b, out, m, k, n);
}

/// Sequential reference kernel (also the fallback when `parallel` is off).
pub fn matmul_into_seq(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        matmul_one_row(&a[i * k..(i + 1) * k], b, &mut out[i * n..(i + 1) * n], n);
    }
}

/// Row-parallel kernel. Each output row is owned by one task and computed
/// with the same inner loop as the sequential kernel, so the float schedule
/// per element is identical.
#[cfg(feature = "parallel")]
pub fn matmul_into_par(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let _ = m;
    out.par_chunks_mut(n)
        .zip(a.par_chunks(k))
        .for_each(|(out_row, a_row)| matmul_one_row(a_row, b, out_row, n));
}

#[inline]
fn matmul_one_row(a_row: &[f64], b: &[f64], out_row: &mut [f64], n: usize) {
    out_row.fill(0.0);
    for (p, &av) in a_row.iter().enumerate() {
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &bv) in out_row.iter_mut().zip(b_row) {
            *o += av * bv;
        }
    }
}

/// Runs one job per item, in parallel when enabled, returning results in the
/// input order. Jobs must be independent (e.g. per-seed training runs).
pub fn map_independent<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.into_iter().map(f).collect()
    }
}

/// Computes `f(i)` for `i in 0..n` and sums the results in index order.
///
/// The partials are produced in parallel when enabled, but the final
/// reduction is always the same left-to-right sum, keeping the result
/// bit-stable across thread counts.
pub fn sum_indexed<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if n >= 64 {
            let partials: Vec<f64> = (0..n).into_par_iter().map(f).collect();
            return partials.iter().sum();
        }
    }
    (0..n).map(f).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn seq_kernel_known_product() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.0, 1.0];
        let mut out = [0.0; 2];
        matmul_into_seq(&a, &b, &mut out, 2, 2, 1);
        assert_eq!(out, [3.0, 7.0]);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn par_kernel_bit_identical_to_seq() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (m, k, n) = (64, 96, 80);
        let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut seq = vec![0.0; m * n];
        let mut par = vec![0.0; m * n];
        matmul_into_seq(&a, &b, &mut seq, m, k, n);
        matmul_into_par(&a, &b, &mut par, m, k, n);
        assert_eq!(seq, par);
    }

    #[test]
    fn sum_indexed_matches_sequential_sum() {
        let f = |i: usize| ((i as f64) * 0.37).sin() / (i as f64 + 1.0);
        let seq: f64 = (0..1000).map(f).sum();
        assert_eq!(sum_indexed(1000, f), seq);
    }

    #[test]
    fn map_independent_preserves_order() {
        let out = map_independent(vec![3u64, 1, 2], |x| x * 10);
        assert_eq!(out, vec![30, 10, 20]);
    }
}
