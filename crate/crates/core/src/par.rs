//! Data-parallel helpers with a sequential fallback.
//!
//! Reductions split their input into fixed-size chunks and combine partial
//! results left to right, so the parallel and sequential paths produce
//! bit-identical floating point results.

/// Elements per reduction chunk. Changing it changes the rounding of long
/// sums, which would change report hashes.
pub const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Uses rayon when the `parallel` feature is enabled, else sequential.
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

/// Sums `f(chunk_range)` over `0..len` split into [`CHUNK`]-sized ranges.
pub fn chunked_sum<F>(exec: Exec, len: usize, f: F) -> f64
where
    F: Fn(std::ops::Range<usize>) -> f64 + Sync,
{
    chunked_map(exec, len, f).into_iter().sum()
}

/// Evaluates `f` on each chunk range, returning results in chunk order.
pub fn chunked_map<T, F>(exec: Exec, len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync,
{
    let chunks = len.div_ceil(CHUNK);
    let range = |i: usize| i * CHUNK..((i + 1) * CHUNK).min(len);
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel if chunks > 1 => {
            use rayon::prelude::*;
            (0..chunks).into_par_iter().map(|i| f(range(i))).collect()
        }
        _ => (0..chunks).map(|i| f(range(i))).collect(),
    }
}

/// Order-preserving map over a slice.
pub fn map<T, U, F>(exec: Exec, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel if items.len() > 1 => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}
