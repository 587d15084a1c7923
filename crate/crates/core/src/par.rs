//! Data-parallel helpers.
//!
//! Every fan-out in the crate goes through [`map_indexed`], which returns
//! results in index order regardless of scheduling. With the `parallel`
//! feature disabled, or with [`Parallelism::Sequential`], it is a plain loop.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Parallelism {
    Sequential,
    #[default]
    Parallel,
}

impl Parallelism {
    /// True when work will actually be spread over the rayon pool.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Parallel
    }
}

/// Apply `f` to `0..n` and collect the results in order.
pub fn map_indexed<T, F>(mode: Parallelism, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if mode.is_parallel() && n > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    let _ = mode;
    (0..n).map(f).collect()
}

/// Run `f` inside a pool bounded to `threads` workers (0 = rayon default).
pub fn with_threads<T: Send, F: FnOnce() -> T + Send>(threads: usize, f: F) -> T {
    #[cfg(feature = "parallel")]
    {
        if threads > 0 {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
                return pool.install(f);
            }
        }
    }
    let _ = threads;
    f()
}

/// Workers available to [`map_indexed`] in the current context.
pub fn current_threads(mode: Parallelism) -> usize {
    #[cfg(feature = "parallel")]
    {
        if mode.is_parallel() {
            return rayon::current_num_threads();
        }
    }
    let _ = mode;
    1
}
