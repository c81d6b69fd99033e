//! Worker pool sized by `CBF_KIT_THREADS`.
//!
//! Work is always split into the same units regardless of the worker count
//! and results come back in input order, so reductions are reproducible.

use std::sync::OnceLock;

use rayon::prelude::*;

pub const THREADS_ENV: &str = "CBF_KIT_THREADS";

fn pool() -> Option<&'static rayon::ThreadPool> {
    static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = worker_threads();
        if threads <= 1 {
            return None;
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .ok()
    })
    .as_ref()
}

/// Worker count: `CBF_KIT_THREADS` if set, else the available parallelism.
pub fn worker_threads() -> usize {
    let available = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    match std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(cap) => cap.clamp(1, available.max(1)),
        None => available,
    }
}

/// Maps `f` over `items`, in parallel when more than one worker is allowed.
pub fn map_ordered<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match pool() {
        Some(pool) if items.len() > 1 => pool.install(|| items.par_iter().map(&f).collect()),
        _ => items.iter().map(f).collect(),
    }
}
