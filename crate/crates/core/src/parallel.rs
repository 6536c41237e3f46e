//! Data-parallel helpers.
//!
//! With the `parallel` feature the helpers fan out over rayon's pool; without
//! it (or after [`set_parallel(false)`](set_parallel)) they run the same closure
//! sequentially. Work is always partitioned by output index and results are
//! collected in index order, so both modes produce bitwise-identical values.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Enables or disables parallel execution at runtime. Has no effect when the
/// crate is built without the `parallel` feature.
pub fn set_parallel(on: bool) {
    PARALLEL.store(on && cfg!(feature = "parallel"), Ordering::Relaxed);
}

pub fn is_parallel() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

/// Runs `f` with the given mode and restores the previous one.
pub fn with_mode<R>(parallel: bool, f: impl FnOnce() -> R) -> R {
    let prev = is_parallel();
    set_parallel(parallel);
    let out = f();
    set_parallel(prev);
    out
}

/// `(0..n).map(f).collect()`, possibly in parallel.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if is_parallel() && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Applies `f(row_index, row)` to each `row_len`-sized chunk of `out`.
pub fn for_each_row<T, F>(out: &mut [T], row_len: usize, min_rows_per_task: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if is_parallel() && out.len() / row_len >= 2 * min_rows_per_task.max(1) {
        use rayon::prelude::*;
        out.par_chunks_mut(row_len)
            .with_min_len(min_rows_per_task.max(1))
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = min_rows_per_task;
    for (i, row) in out.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}
