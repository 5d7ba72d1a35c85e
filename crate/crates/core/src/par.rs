//! Data-parallel execution of independent per-utterance and per-run work.
//!
//! With the `parallel` feature (default) the work is spread over a rayon pool;
//! without it the same API runs sequentially. Results are collected in input
//! order and reduced sequentially by the callers, so outputs are bit-identical
//! for any thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    #[cfg(feature = "parallel")]
    Rayon,
}

impl Default for Parallelism {
    #[cfg(feature = "parallel")]
    fn default() -> Self {
        Parallelism::Rayon
    }
    #[cfg(not(feature = "parallel"))]
    fn default() -> Self {
        Parallelism::Sequential
    }
}

/// Apply `f` to every item and collect results in input order.
pub fn map_collect<T, R, F>(mode: Parallelism, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match mode {
        Parallelism::Sequential => items.iter().map(f).collect(),
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => items.par_iter().map(f).collect(),
    }
}

/// Run `f` over `0..n` and collect results in index order.
pub fn map_indices<R, F>(mode: Parallelism, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match mode {
        Parallelism::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => (0..n).into_par_iter().map(f).collect(),
    }
}

/// Build a scoped rayon pool of the given width for nested runs (sweep jobs).
/// Sequential mode ignores `jobs` and runs inline.
pub fn with_jobs<R, F>(mode: Parallelism, jobs: usize, f: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    match mode {
        Parallelism::Sequential => {
            let _ = jobs;
            f()
        }
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs.max(1))
                .build()
                .expect("rayon pool");
            pool.install(f)
        }
    }
}
