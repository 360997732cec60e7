//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper returns results in index order, so callers that reduce the
//! output with a plain left fold get bit-identical sums whether or not the
//! `parallel` feature is enabled and regardless of the thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Evaluates `f(0), f(1), ..., f(n - 1)` and returns the results in order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
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

/// Maps over fixed-size chunks of `0..n`, in chunk order.
pub fn map_chunks<T, F>(n: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
{
    let chunk = chunk.max(1);
    let chunks = n.div_ceil(chunk);
    map_indexed(chunks, |c| f(c * chunk..((c + 1) * chunk).min(n)))
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
