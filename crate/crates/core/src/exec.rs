//! Rayon/sequential dispatch for the data-parallel loops.
//!
//! Per-device local training and batch solves are embarrassingly
//! parallel: items are independent and results are merged in input
//! order. [`map_slice`] runs them on the rayon pool when the `parallel`
//! feature is enabled (the default) and as a plain loop otherwise; both
//! paths produce bit-identical output because ordering never depends on
//! scheduling. [`map_slice_seq`] is always sequential and exists as the
//! benchmark baseline.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, preserving input order in the output.
///
/// Dispatches to the rayon pool under the `parallel` feature, otherwise
/// runs sequentially. The result is identical either way.
#[cfg(feature = "parallel")]
pub fn map_slice<T: Sync, U: Send, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U + Sync + Send,
{
    items.par_iter().map(f).collect()
}

/// Maps `f` over `items`, preserving input order in the output.
///
/// Dispatches to the rayon pool under the `parallel` feature, otherwise
/// runs sequentially. The result is identical either way.
#[cfg(not(feature = "parallel"))]
pub fn map_slice<T: Sync, U: Send, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Sequential reference path for [`map_slice`]; the benchmark baseline.
pub fn map_slice_seq<T: Sync, U: Send, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Caps the global worker pool at `threads` (0 leaves the default).
///
/// Only meaningful with the `parallel` feature; without it this is a
/// no-op. Errors if the pool was already initialized with a different
/// size, which callers should treat as a configuration mistake.
#[cfg(feature = "parallel")]
pub fn configure_threads(threads: usize) -> Result<(), String> {
    if threads == 0 {
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| e.to_string())
}

/// Caps the global worker pool at `threads` (0 leaves the default).
///
/// Only meaningful with the `parallel` feature; without it this is a
/// no-op. Errors if the pool was already initialized with a different
/// size, which callers should treat as a configuration mistake.
#[cfg(not(feature = "parallel"))]
pub fn configure_threads(_threads: usize) -> Result<(), String> {
    Ok(())
}
