//! Data-parallel helpers. All batch- and channel-level fan-out in the crate
//! goes through `run_indexed` so results are always produced in index order:
//! callers reduce sequentially over the returned Vec, which makes numeric
//! output identical whether the `parallel` feature is enabled or not.

/// Maps `f` over `0..n`, in parallel when the `parallel` feature is on.
/// The output order is always `0..n`.
#[cfg(feature = "parallel")]
pub fn run_indexed<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn run_indexed<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    (0..n).map(f).collect()
}

/// Sequential reference path with the same signature; used by benchmarks to
/// compare against the parallel path within a single build.
pub fn run_indexed_seq<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    (0..n).map(f).collect()
}

/// Fallible variant of [`run_indexed`]. On error, the lowest-index failure
/// is reported so error messages are deterministic too.
pub fn try_run_indexed<T, E, F>(n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    let mut out = Vec::with_capacity(n);
    for item in run_indexed(n, f) {
        out.push(item?);
    }
    Ok(out)
}
