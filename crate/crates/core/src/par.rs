//! Data-parallel map helpers with a sequential fallback.
//!
//! With the `parallel` feature the maps run on the rayon pool; without it
//! they are plain iterator loops. Both variants collect results in input
//! order, and every caller reduces those results sequentially, so the
//! numbers coming out of this crate do not depend on the feature flag or on
//! the worker count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, preserving input order in the output.
#[cfg(feature = "parallel")]
pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.par_iter().map(f).collect()
}

/// Maps `f` over `items`, preserving input order in the output.
#[cfg(not(feature = "parallel"))]
pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Maps `f` over `0..n`, preserving index order in the output.
#[cfg(feature = "parallel")]
pub fn map_indices<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Maps `f` over `0..n`, preserving index order in the output.
#[cfg(not(feature = "parallel"))]
pub fn map_indices<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}

/// Caps the global worker pool at `jobs` threads. Must be called before any
/// parallel work; later calls are ignored. A no-op without the `parallel`
/// feature.
#[cfg(feature = "parallel")]
pub fn init_thread_pool(jobs: Option<usize>) {
    if let Some(n) = jobs {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Caps the global worker pool at `jobs` threads. Must be called before any
/// parallel work; later calls are ignored. A no-op without the `parallel`
/// feature.
#[cfg(not(feature = "parallel"))]
pub fn init_thread_pool(jobs: Option<usize>) {
    if jobs.is_some() {
        log::warn!("built without the `parallel` feature; --jobs has no effect");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_collect_preserves_order() {
        let items: Vec<u64> = (0..1000).collect();
        let out = map_collect(&items, |x| x * 2);
        assert_eq!(out, (0..1000).map(|x| x * 2).collect::<Vec<u64>>());
    }

    #[test]
    fn map_indices_preserves_order() {
        let out = map_indices(257, |i| i as i64 - 7);
        assert_eq!(out, (0..257).map(|i| i as i64 - 7).collect::<Vec<i64>>());
    }
}
