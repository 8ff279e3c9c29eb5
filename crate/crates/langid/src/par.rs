//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) these map work onto rayon; without
//! it they degrade to plain sequential iteration. Results are collected in
//! input order and every per-item computation owns its RNG state, so outputs
//! are identical regardless of thread count or feature selection.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, preserving order.
pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Send + Sync,
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

/// Map `f` over the index range `0..n`, preserving order.
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Always-sequential equivalent of [`map_range`], kept for benchmark
/// comparisons against the parallel path.
pub fn map_range_seq<U, F>(n: usize, mut f: F) -> Vec<U>
where
    F: FnMut(usize) -> U,
{
    (0..n).map(&mut f).collect()
}

/// Cap the global rayon pool at `n` threads. Must be called before any
/// parallel work; later calls are ignored. A no-op without the feature.
pub fn configure_threads(n: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
    }
}
