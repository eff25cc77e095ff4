//! Small numeric helpers: stable reductions, float formatting, and the fixed
//! chunk decomposition used to keep parallel results schedule-independent.

use std::ops::Range;

use rayon::prelude::*;

/// Rows per work chunk in parallel batch evaluations. Fixed (independent of
/// thread count) so reduction order, and therefore every emitted float, is
/// identical across machines and rerun counts.
pub const PAR_CHUNK: usize = 512;

/// log(sum(exp(xs))) with max-shift stabilization.
///
/// Empty input and all-(-inf) input both yield -inf.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        // all -inf (or empty): the sum is 0; NaN propagates on its own
        return m;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Formats with 17 significant digits, enough to reconstruct the exact f64.
pub fn fmt_g17(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

/// Splits `0..n` into `PAR_CHUNK`-sized ranges.
pub fn chunk_ranges(n: usize) -> Vec<Range<usize>> {
    (0..n)
        .step_by(PAR_CHUNK.max(1))
        .map(|s| s..(s + PAR_CHUNK).min(n))
        .collect()
}

/// Maps fixed chunks of `0..n` in parallel and returns the per-chunk results
/// in chunk order. Callers fold the chunk results sequentially, which keeps
/// floating-point accumulation order independent of the rayon schedule.
pub fn par_chunk_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
{
    chunk_ranges(n).into_par_iter().map(f).collect()
}

/// Sequential pairwise (tree) summation; bounds rounding error growth and
/// pins a single accumulation order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
        }
    }
}

/// Adds `src` into `dst` elementwise. Lengths must already agree.
pub fn add_assign(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
