//! Execution policy for the data-parallel kernels.
//!
//! With the `parallel` feature (default) the `Rayon` policy runs on the rayon
//! pool. Without it every policy runs sequentially, so results never depend on
//! the feature set.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecPolicy {
    Sequential,
    Rayon,
}

impl Default for ExecPolicy {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            ExecPolicy::Rayon
        } else {
            ExecPolicy::Sequential
        }
    }
}

/// Calls `f(k, chunk)` for each consecutive chunk of `out` of length `chunk`.
pub fn for_each_chunk_mut<T, F>(policy: ExecPolicy, out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    match policy {
        #[cfg(feature = "parallel")]
        ExecPolicy::Rayon => out
            .par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(k, c)| f(k, c)),
        _ => out.chunks_mut(chunk).enumerate().for_each(|(k, c)| f(k, c)),
    }
}

/// Maps `0..n` through `f`, preserving order.
pub fn map_indices<R, F>(policy: ExecPolicy, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match policy {
        #[cfg(feature = "parallel")]
        ExecPolicy::Rayon => (0..n).into_par_iter().map(f).collect(),
        _ => (0..n).map(f).collect(),
    }
}

/// Number of worker threads the `Rayon` policy would use.
pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Caps the global worker pool. Only the first call has an effect.
pub fn init_threads(n: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
        false
    }
}
