//! Ordered map over independent work units.
//!
//! With the `parallel` feature and `jobs > 1` the units run on a dedicated
//! rayon pool; otherwise they run in order on the calling thread. Results
//! always come back in index order, so callers reduce identically either way.

/// Resolve a requested worker count: `0` means "all available cores".
pub fn resolve_jobs(jobs: usize) -> usize {
    if jobs > 0 {
        return jobs;
    }
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// `(0..n).map(f)` evaluated on up to `jobs` workers.
pub fn map_indexed<U, F>(n: usize, jobs: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        let jobs = resolve_jobs(jobs).min(n.max(1));
        if jobs > 1 {
            use rayon::prelude::*;
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
                return pool.install(|| (0..n).into_par_iter().map(&f).collect());
            }
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = jobs;
    (0..n).map(f).collect()
}

/// Like [`map_indexed`] but stops at the first error in index order.
pub fn try_map_indexed<U, E, F>(n: usize, jobs: usize, f: F) -> Result<Vec<U>, E>
where
    U: Send,
    E: Send,
    F: Fn(usize) -> Result<U, E> + Sync + Send,
{
    map_indexed(n, jobs, f).into_iter().collect()
}
