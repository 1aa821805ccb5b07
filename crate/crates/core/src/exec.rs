//! Execution mode for the data-parallel inner loops.
//!
//! Every parallel path in this crate splits work over independent outputs
//! (matrix rows, micro-batches, points, records) and merges in a fixed order,
//! so `Parallel` produces bit-identical results to `Sequential`. The
//! sequential mode exists as the mandated deterministic single-threaded
//! default; tests run under it unless they specifically compare the two.

/// How to run loops that are eligible for data parallelism.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    /// Single-threaded; the default and the test baseline.
    #[default]
    Sequential,
    /// Rayon work-stealing over independent outputs. Falls back to
    /// sequential when the `parallel` feature is disabled.
    Parallel,
}

impl ExecMode {
    #[inline]
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && matches!(self, ExecMode::Parallel)
    }

    pub fn from_deterministic(deterministic: bool) -> Self {
        if deterministic {
            ExecMode::Sequential
        } else {
            ExecMode::Parallel
        }
    }
}

/// Map `items` through `f`, preserving order.
pub fn map_items<T, U, F>(mode: ExecMode, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = mode;
    items.iter().map(f).collect()
}

/// Map over indices `0..n`, preserving order.
pub fn map_indices<U, F>(mode: ExecMode, n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = mode;
    (0..n).map(f).collect()
}
