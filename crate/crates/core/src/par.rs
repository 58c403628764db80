//! Sample-level fan-out.
//!
//! Training batches and evaluation sweeps are embarrassingly parallel over
//! samples. With the `parallel` feature (default) those loops run on the rayon
//! pool; without it, or after [`set_mode`]`(ExecMode::Sequential)`, they run in
//! index order on the calling thread. Results are always collected in index
//! order and any reduction happens afterwards in a fixed order, so both modes
//! produce bit-identical outputs.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(true);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    Parallel,
}

/// Select the process-wide execution mode. `Parallel` is a no-op request when
/// the crate is built without the `parallel` feature.
pub fn set_mode(mode: ExecMode) {
    PARALLEL.store(mode == ExecMode::Parallel, Ordering::Relaxed);
}

/// The mode loops will actually use.
pub fn mode() -> ExecMode {
    if cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed) {
        ExecMode::Parallel
    } else {
        ExecMode::Sequential
    }
}

/// Run `f` under `mode`, restoring the previous mode afterwards.
pub fn with_mode<T>(mode: ExecMode, f: impl FnOnce() -> T) -> T {
    let prev = PARALLEL.swap(mode == ExecMode::Parallel, Ordering::Relaxed);
    let out = f();
    PARALLEL.store(prev, Ordering::Relaxed);
    out
}

/// `(0..n).map(f).collect()`, fanned out when parallel mode is active.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if mode() == ExecMode::Parallel && n > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Like [`map_indexed`] but short-circuits on the first error (lowest index wins).
pub fn try_map_indexed<T, E, F>(n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_indexed(n, f).into_iter().collect()
}
