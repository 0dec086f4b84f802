//! Virtual-clock latency accounting.

use crate::pmem::{thread_flush_count, PmArena};

/// Run `f` and charge it the flush latency of every flush issued by the
/// calling thread, plus `op_base_ns`.
pub fn timed<T>(arena: &PmArena, op_base_ns: u64, f: impl FnOnce() -> T) -> (T, u64) {
    let before = thread_flush_count();
    let out = f();
    let flushes = thread_flush_count() - before;
    (out, flushes * arena.config().flush_latency_ns + op_base_ns)
}

/// `exp(mean(ln(max(x, 1))))`, accumulated in `f64` in input order.
pub fn geo_mean(xs: &[u64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let sum: f64 = xs.iter().map(|&x| (x.max(1) as f64).ln()).sum();
    (sum / xs.len() as f64).exp()
}

/// Nearest-rank percentile: the value at rank `ceil(p/100 * n)` of the
/// sorted sample.
pub fn percentile(xs: &[u64], p: f64) -> u64 {
    if xs.is_empty() {
        return 0;
    }
    let mut v = xs.to_vec();
    v.sort_unstable();
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}
