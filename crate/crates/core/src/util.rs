//! Deterministic parallelism helpers.
//!
//! Every parallel reduction in this crate splits its domain into fixed-size
//! chunks, computes one partial result per chunk, and combines the partials in
//! chunk order. The combined result is therefore bit-identical no matter how
//! many worker threads run, so a fixed seed fully determines every output.
//! `GSCODEC_THREADS` caps the pool size (1 forces serial execution).

use std::sync::OnceLock;

use rayon::prelude::*;

static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();

/// The shared worker pool, sized from `GSCODEC_THREADS` when set.
pub fn pool() -> &'static rayon::ThreadPool {
    POOL.get_or_init(|| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = std::env::var("GSCODEC_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
        {
            builder = builder.num_threads(n.max(1));
        }
        builder.build().expect("thread pool construction failed")
    })
}

/// Map `f` over the chunks of `0..n` (each chunk is `start..end`) in parallel
/// and return the per-chunk results in chunk order.
pub fn par_chunk_map<T, F>(n: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, usize) -> T + Sync,
{
    assert!(chunk > 0);
    let ranges: Vec<(usize, usize)> = (0..n)
        .step_by(chunk)
        .map(|s| (s, (s + chunk).min(n)))
        .collect();
    pool().install(|| ranges.par_iter().map(|&(s, e)| f(s, e)).collect())
}

/// Sum per-chunk gradient buffers into `acc` in chunk order.
pub fn fold_partials(acc: &mut [f64], partials: Vec<Vec<f64>>) {
    for part in partials {
        debug_assert_eq!(part.len(), acc.len());
        for (a, p) in acc.iter_mut().zip(part) {
            *a += p;
        }
    }
}

/// Logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Derivative of the logistic sigmoid.
pub fn sigmoid_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

/// Inverse of the logistic sigmoid; input must lie strictly in (0, 1).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Round half away from zero, the fixed tie-break used by quantization so
/// byte streams match across platforms.
pub fn round_half_away(x: f64) -> f64 {
    if x >= 0.0 {
        (x + 0.5).floor()
    } else {
        (x - 0.5).ceil()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_matches_closed_form() {
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!((sigmoid(1.386_294_4) - 0.8).abs() < 1e-7);
        assert!((sigmoid(-700.0)).abs() < 1e-300);
        assert!((sigmoid(700.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn logit_inverts_sigmoid() {
        for &p in &[1e-6, 0.01, 0.5, 0.99, 1.0 - 1e-6] {
            assert!((sigmoid(logit(p)) - p).abs() < 1e-12);
        }
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(round_half_away(0.5), 1.0);
        assert_eq!(round_half_away(1.5), 2.0);
        assert_eq!(round_half_away(-0.5), -1.0);
        assert_eq!(round_half_away(2.4), 2.0);
        assert_eq!(round_half_away(-2.6), -3.0);
    }

    #[test]
    fn chunk_map_covers_domain_in_order() {
        let parts = par_chunk_map(10, 3, |s, e| (s, e));
        assert_eq!(parts, vec![(0, 3), (3, 6), (6, 9), (9, 10)]);
    }

    #[test]
    fn chunk_sum_is_thread_count_invariant() {
        // The same chunked reduction, serial vs pooled, must agree exactly.
        let data: Vec<f64> = (0..10_000).map(|i| (i as f64 * 0.37).sin()).collect();
        let serial: f64 = {
            let parts: Vec<f64> = (0..data.len())
                .step_by(128)
                .map(|s| data[s..(s + 128).min(data.len())].iter().sum())
                .collect();
            parts.iter().sum()
        };
        let parallel: f64 = par_chunk_map(data.len(), 128, |s, e| data[s..e].iter().sum::<f64>())
            .iter()
            .sum();
        assert_eq!(serial.to_bits(), parallel.to_bits());
    }
}
