//! Thread-count-independent parallel reductions.
//!
//! Floating-point addition is not associative, so a naive parallel sum gives
//! different bits depending on how work is split. Every reduction here splits
//! the index range into fixed-size chunks, reduces each chunk sequentially,
//! and folds the per-chunk results in chunk order. The thread pool only
//! decides *when* a chunk runs, never how the arithmetic associates, so the
//! result is a pure function of the inputs.

use rayon::prelude::*;

/// Fixed chunk width for all deterministic reductions.
pub const CHUNK: usize = 4096;

/// Sum `f(i)` over `0..m` with fixed association.
pub fn chunked_sum<F>(m: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let partials: Vec<f64> = (0..m.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(m);
            let mut acc = 0.0;
            for i in lo..hi {
                acc += f(i);
            }
            acc
        })
        .collect();
    partials.into_iter().sum()
}

/// Accumulate a vector of `k` statistics over `0..m` with fixed association.
///
/// The closure adds index `i`'s contribution into the accumulator slice.
pub fn chunked_accumulate<F>(m: usize, k: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let partials: Vec<Vec<f64>> = (0..m.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(m);
            let mut acc = vec![0.0; k];
            for i in lo..hi {
                f(i, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; k];
    for part in partials {
        for (t, p) in total.iter_mut().zip(part) {
            *t += p;
        }
    }
    total
}

/// Mean and standard error of `f(i)` over `0..m`.
pub fn mean_and_se<F>(m: usize, f: F) -> (f64, f64)
where
    F: Fn(usize) -> f64 + Sync,
{
    let sums = chunked_accumulate(m, 2, |i, acc| {
        let v = f(i);
        acc[0] += v;
        acc[1] += v * v;
    });
    let n = m as f64;
    let mean = sums[0] / n;
    let var = (sums[1] / n - mean * mean).max(0.0);
    (mean, (var / n).sqrt())
}
