//! Data-parallel helpers.
//!
//! With the `parallel` feature (on by default) work is spread over a rayon
//! pool sized by [`Execution`]; without it, or with one thread, the same
//! closures run sequentially. Results always come back in input order, so
//! any reduction done by the caller is identical on both paths.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "CATT_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Execution {
    threads: usize,
}

impl Default for Execution {
    fn default() -> Self {
        Self::sequential()
    }
}

impl Execution {
    pub fn sequential() -> Self {
        Self { threads: 1 }
    }

    pub fn with_threads(threads: usize) -> Self {
        Self {
            threads: threads.max(1),
        }
    }

    /// Reads `CATT_THREADS`; unset or unparsable means one thread.
    pub fn from_env() -> Self {
        let threads = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .unwrap_or(1);
        Self::with_threads(threads)
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    pub fn is_parallel(&self) -> bool {
        cfg!(feature = "parallel") && self.threads > 1
    }
}

/// `items.iter().map(f).collect()`, possibly in parallel.
pub fn map_collect<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(exec.threads).build() {
            return pool.install(|| items.par_iter().map(&f).collect());
        }
    }
    let _ = exec;
    items.iter().map(f).collect()
}

/// `(0..n).map(f).collect()`, possibly in parallel.
pub fn map_range<R, F>(exec: Execution, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(exec.threads).build() {
            return pool.install(|| (0..n).into_par_iter().map(&f).collect());
        }
    }
    let _ = exec;
    (0..n).map(f).collect()
}
