//! Batch execution strategy.
//!
//! All per-image work in this crate is independent, so batch stages map a
//! closure over an index range and assemble results in index order. With the
//! `parallel` feature (default) the map runs on rayon; without it, the
//! sequential fallback below is used. Both paths produce identical results
//! because every work item derives its own rng stream and the output order is
//! fixed by index, so the feature only changes wall-clock time.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Map `f` over `0..n`, collecting results in index order.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    map_indexed_seq(n, f)
}

/// Sequential version of [`map_indexed`]; always available so benchmarks can
/// compare both strategies in one build.
pub fn map_indexed_seq<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}
