//! Order-preserving sharding over index ranges.

/// Splits `0..total` into at most `jobs` contiguous shards, runs `f` on each
/// (on scoped threads when `jobs > 1`) and returns the results in shard order.
pub fn sharded<T, F>(total: usize, jobs: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, usize) -> T + Sync,
{
    let jobs = jobs.clamp(1, total.max(1));
    let bounds: Vec<(usize, usize)> = (0..jobs)
        .map(|j| (total * j / jobs, total * (j + 1) / jobs))
        .collect();
    if jobs == 1 {
        return vec![f(0, total)];
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = bounds
            .iter()
            .map(|&(s, e)| {
                let f = &f;
                scope.spawn(move || f(s, e))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

/// Worker count from an explicit value, else `URLLC_LAB_JOBS`, else 1.
pub fn resolve_jobs(explicit: Option<usize>) -> usize {
    explicit
        .or_else(|| std::env::var("URLLC_LAB_JOBS").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(1)
        .max(1)
}

/// Independent child seed for stream `stream` of `seed` (splitmix64 finalizer).
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
