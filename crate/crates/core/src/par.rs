//! Deterministic data parallelism for the heavy kernels.
//!
//! Work is split into contiguous row chunks; every row is computed by exactly
//! the same sequence of floating-point operations no matter how many threads
//! run, so results are bit-identical for any thread count. The global count
//! defaults to 1 and is only raised explicitly (CLI `--threads`).

use std::sync::atomic::{AtomicUsize, Ordering};

static THREAD_COUNT: AtomicUsize = AtomicUsize::new(1);

/// Sets the global worker count used by the parallel kernels. Clamped to ≥ 1.
pub fn set_threads(n: usize) {
    THREAD_COUNT.store(n.max(1), Ordering::Relaxed);
}

/// Current global worker count.
pub fn threads() -> usize {
    THREAD_COUNT.load(Ordering::Relaxed)
}

/// Runs `f` over `out` split into contiguous row chunks on `nthreads` scoped
/// threads. `f(first_row, chunk)` must fill its chunk purely from shared
/// read-only state; chunks are disjoint so no synchronization is needed.
pub fn run_row_chunks<T, F>(out: &mut [T], rows: usize, row_len: usize, nthreads: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    assert_eq!(out.len(), rows * row_len, "output buffer does not match rows x row_len");
    let workers = nthreads.max(1).min(rows.max(1));
    if workers <= 1 || rows == 0 {
        f(0, out);
        return;
    }
    let rows_per = rows.div_ceil(workers);
    std::thread::scope(|scope| {
        let f = &f;
        let mut rest = out;
        let mut row0 = 0usize;
        while row0 < rows {
            let take_rows = rows_per.min(rows - row0);
            let (chunk, tail) = std::mem::take(&mut rest).split_at_mut(take_rows * row_len);
            rest = tail;
            let first = row0;
            scope.spawn(move || f(first, chunk));
            row0 += take_rows;
        }
    });
}
