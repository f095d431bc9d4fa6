//! Worker-thread configuration for the convolution kernels.
//!
//! Parallel sections split work across batch elements or output rows; every
//! element is still reduced in a fixed serial order, so results are
//! bit-identical for any thread count. Thread count 1 disables the pool
//! entirely.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

static THREADS: AtomicUsize = AtomicUsize::new(1);

fn pool_slot() -> &'static Mutex<Option<(usize, Arc<rayon::ThreadPool>)>> {
    static SLOT: OnceLock<Mutex<Option<(usize, Arc<rayon::ThreadPool>)>>> = OnceLock::new();
    SLOT.get_or_init(|| Mutex::new(None))
}

/// Set the worker-thread count. `0` selects the number of available CPUs.
pub fn set_threads(n: usize) {
    let n = if n == 0 {
        std::thread::available_parallelism()
            .map(|v| v.get())
            .unwrap_or(1)
    } else {
        n
    };
    THREADS.store(n, Ordering::Relaxed);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::Relaxed).max(1)
}

/// Run `f` inside a pool of the configured size, or inline when single-threaded.
pub(crate) fn install<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    let n = threads();
    if n <= 1 {
        return f();
    }
    let pool = {
        let mut slot = pool_slot().lock().unwrap();
        match slot.as_ref() {
            Some((size, pool)) if *size == n => pool.clone(),
            _ => {
                let pool = Arc::new(
                    rayon::ThreadPoolBuilder::new()
                        .num_threads(n)
                        .build()
                        .expect("thread pool construction"),
                );
                *slot = Some((n, pool.clone()));
                pool
            }
        }
    };
    pool.install(f)
}
