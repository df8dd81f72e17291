//! Data-parallel inner loops with a sequential fallback.
//!
//! With the default `parallel` feature the `map_indexed` family fans work
//! out over rayon; without it the same API runs sequentially. Results are
//! collected in index order either way, so callers that reduce them in a
//! fixed order (gradient sums, corpus writers) get identical bytes under
//! both modes and any thread count. `map_indexed_seq` is always sequential
//! and exists so benchmarks can compare the two paths directly.

/// Maps `f` over `0..n`, preserving index order in the output.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

/// Maps `f` over `0..n`, preserving index order in the output.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Sequential reference path, kept available under every feature set.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}
