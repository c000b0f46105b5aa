//! Order-stable reductions.
//!
//! Every sum that feeds a reported number goes through [`pairwise_sum`] so the
//! result depends only on the input order, never on thread scheduling.

use rayon::prelude::*;

const LEAF: usize = 256;
const CHUNK: usize = 1 << 14;

/// Pairwise (tree) summation with a fixed split pattern.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Parallel sum of `f(i)` over `0..n`. Chunks are fixed-size and combined in
/// order, so the result is bitwise identical for any thread count.
pub fn par_sum_by<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let partials: Vec<f64> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let lo = chunk * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let terms: Vec<f64> = (lo..hi).map(&f).collect();
            pairwise_sum(&terms)
        })
        .collect();
    pairwise_sum(&partials)
}

pub fn par_dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    par_sum_by(a.len(), |i| a[i] * b[i])
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(values) / values.len() as f64
}

/// Median that picks the lower of the two middle elements for even counts.
pub fn lower_median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted[(sorted.len() - 1) / 2]
}

/// Linear-interpolated quantile, `q` in [0,1].
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = pos - lo as f64;
    sorted[lo] * (1.0 - t) + sorted[hi] * t
}
