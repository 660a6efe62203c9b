//! Worker pools for the data-parallel flow kernels.
//!
//! Every parallel kernel in this crate splits work over *output* indices and
//! accumulates each output sequentially in a fixed order, so results do not
//! depend on the worker count.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rayon::{ThreadPool, ThreadPoolBuilder};

/// Number of worker threads; `0` means all available cores.
pub fn resolve_workers(workers: usize) -> usize {
    if workers == 0 {
        available_cores()
    } else {
        workers
    }
}

pub fn available_cores() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Shared pool with exactly `resolve_workers(workers)` threads.
pub fn pool(workers: usize) -> Arc<ThreadPool> {
    static POOLS: OnceLock<Mutex<HashMap<usize, Arc<ThreadPool>>>> = OnceLock::new();
    let n = resolve_workers(workers);
    let mut pools = POOLS
        .get_or_init(|| Mutex::new(HashMap::new()))
        .lock()
        .unwrap_or_else(|e| e.into_inner());
    pools
        .entry(n)
        .or_insert_with(|| {
            Arc::new(
                ThreadPoolBuilder::new()
                    .num_threads(n)
                    .thread_name(move |i| format!("covflow-{n}-{i}"))
                    .build()
                    .expect("failed to build worker pool"),
            )
        })
        .clone()
}

/// Runs `op` on the pool for `workers`.
pub fn install<R: Send>(workers: usize, op: impl FnOnce() -> R + Send) -> R {
    pool(workers).install(op)
}
