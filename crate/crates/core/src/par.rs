//! Deterministic parallel primitives.
//!
//! Every parallel construct in the crate goes through this module so that
//! results are bit-identical across runs and thread counts: maps write to
//! pre-sized output slots, and reductions combine fixed-size chunk partials
//! in index order.

use rayon::prelude::*;

/// Chunk length for parallel reductions. Fixed so that the floating-point
/// combination order never depends on the thread count.
pub const CHUNK: usize = 16 * 1024;

/// Parallel map over `0..n` into a vector. Output order is by index, so the
/// result is independent of scheduling.
pub fn par_map<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    (0..n).into_par_iter().map(f).collect()
}

/// Deterministic parallel sum: per-chunk Kahan partials combined sequentially.
pub fn det_sum<F: Fn(usize) -> f64 + Sync>(n: usize, f: F) -> f64 {
    let partials: Vec<f64> = (0..n)
        .into_par_iter()
        .chunks(CHUNK)
        .map(|chunk| {
            let mut sum = 0.0;
            let mut c = 0.0;
            for i in chunk {
                let y = f(i) - c;
                let t = sum + y;
                c = (t - sum) - y;
                sum = t;
            }
            sum
        })
        .collect();
    partials.iter().sum()
}

/// Deterministic parallel sum of slice values.
pub fn det_sum_slice(values: &[f64]) -> f64 {
    det_sum(values.len(), |i| values[i])
}

/// Parallel in-place update of equally sized chunks of a buffer.
pub fn par_chunks_mut<T: Send, F: Fn(usize, &mut [T]) + Sync>(
    buf: &mut [T],
    chunk: usize,
    f: F,
) {
    buf.par_chunks_mut(chunk).enumerate().for_each(|(ci, c)| f(ci * chunk, c));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn det_sum_matches_sequential_kahan() {
        let vals: Vec<f64> = (0..100_000).map(|i| ((i * 2654435761_usize) % 1000) as f64 * 1e-3).collect();
        let a = det_sum_slice(&vals);
        let b = det_sum_slice(&vals);
        assert_eq!(a.to_bits(), b.to_bits());
        let seq: f64 = vals.iter().sum();
        assert!((a - seq).abs() < 1e-6 * seq.abs().max(1.0));
    }

    #[test]
    fn par_map_is_ordered() {
        let v = par_map(1000, |i| i * i);
        for (i, x) in v.iter().enumerate() {
            assert_eq!(*x, i * i);
        }
    }
}
