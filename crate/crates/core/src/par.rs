//! Execution policy for the data-parallel kernels.
//!
//! Every parallel path partitions work so that each output element is
//! produced by exactly one task in a fixed order, and partial results are
//! reduced sequentially. Results are therefore identical whether the
//! parallel or the sequential path runs.

use std::sync::atomic::{AtomicBool, Ordering};

static SEQUENTIAL: AtomicBool = AtomicBool::new(false);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

/// Selects the execution policy process-wide. Without the `parallel`
/// feature this is a no-op and everything runs sequentially.
pub fn set_execution(mode: Execution) {
    SEQUENTIAL.store(mode == Execution::Sequential, Ordering::Relaxed);
}

pub fn execution() -> Execution {
    if cfg!(feature = "parallel") && !SEQUENTIAL.load(Ordering::Relaxed) {
        Execution::Parallel
    } else {
        Execution::Sequential
    }
}

/// Below this many tasks the parallel path is not worth the scheduling cost.
#[cfg(feature = "parallel")]
const MIN_PAR_TASKS: usize = 2;

/// `(0..n).map(f).collect()`, possibly in parallel. Output order is preserved.
pub fn map_collect<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if n >= MIN_PAR_TASKS && execution() == Execution::Parallel {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Runs `f` with the parallel helpers limited to `workers` threads; 0 keeps
/// the global pool.
pub fn with_workers<R, F>(workers: usize, f: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    #[cfg(feature = "parallel")]
    {
        if workers > 0 {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
                return pool.install(f);
            }
        }
    }
    let _ = workers;
    f()
}

/// Applies `f(index, chunk)` to consecutive `chunk`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    {
        if data.len() >= MIN_PAR_TASKS * chunk && execution() == Execution::Parallel {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
            return;
        }
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}
