//! Ordered map over independent work items (utterances, batches, pairs).
//!
//! With the `parallel` feature (on by default) `map_ordered` fans out on the
//! rayon pool; without it the same call degrades to a sequential loop. Output
//! order always matches input order, so downstream reductions stay
//! deterministic regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Ordered map, parallel when the `parallel` feature is enabled.
pub fn map_ordered<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Ordered map that always runs on the calling thread. Kept unconditionally
/// available so benchmarks can compare against the parallel path.
pub fn map_sequential<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Cap the worker pool at `jobs` threads. `0` keeps the library default.
/// Calling this more than once is a no-op after the first pool is built.
#[cfg(feature = "parallel")]
pub fn configure_jobs(jobs: usize) {
    if jobs == 0 {
        return;
    }
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global();
}

#[cfg(not(feature = "parallel"))]
pub fn configure_jobs(_jobs: usize) {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let items: Vec<u64> = (0..1000).collect();
        let out = map_ordered(&items, |x| x * 2);
        let seq = map_sequential(&items, |x| x * 2);
        assert_eq!(out, seq);
    }
}
