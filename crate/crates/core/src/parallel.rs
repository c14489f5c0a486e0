//! Worker pool shared by training and evaluation.
//!
//! `HIDE_FORGE_THREADS` caps the number of workers; by default every
//! available core is used. Results are always reduced in input order, so the
//! thread count never changes a numeric output.

use std::sync::OnceLock;

use rayon::{ThreadPool, ThreadPoolBuilder};

pub const THREADS_ENV: &str = "HIDE_FORGE_THREADS";

pub fn pool() -> &'static ThreadPool {
    static POOL: OnceLock<ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|n| *n > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        ThreadPoolBuilder::new().num_threads(threads).build().expect("worker pool")
    })
}
