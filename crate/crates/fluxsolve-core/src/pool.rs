//! Deterministic fork-join helper for per-sample work.
//!
//! Worker count comes from the `FLUXSOLVE_THREADS` environment variable
//! (clamped to at least 1), defaulting to the number of available cores.
//! Results are always merged in input order, so parallel runs are
//! byte-identical to sequential ones.

/// Worker count honoring `FLUXSOLVE_THREADS`.
pub fn worker_count() -> usize {
    match std::env::var("FLUXSOLVE_THREADS") {
        Ok(v) => v.trim().parse::<usize>().unwrap_or(1).max(1),
        Err(_) => std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1),
    }
}

/// Applies `f` to every index in `0..n`, possibly in parallel, returning
/// results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = worker_count().min(n.max(1));
    if workers <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let mut results: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(workers);
    std::thread::scope(|scope| {
        for (w, slot_chunk) in results.chunks_mut(chunk).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (k, slot) in slot_chunk.iter_mut().enumerate() {
                    *slot = Some(f(w * chunk + k));
                }
            });
        }
    });
    results
        .into_iter()
        .map(|r| r.expect("worker filled every slot"))
        .collect()
}
