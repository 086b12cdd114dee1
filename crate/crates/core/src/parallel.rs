//! Fan-out over independent work items.
//!
//! With the `parallel` feature (default) [`map`] runs on rayon; without it,
//! or when `CABERNET_THREADS=1`, it degrades to [`map_seq`]. Results always
//! come back in input order, so sweeps are reproducible regardless of
//! scheduling.

/// Environment variable capping the worker count for sweeps.
pub const THREADS_ENV: &str = "CABERNET_THREADS";

pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

pub fn map_seq<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    F: Fn(T) -> R,
{
    items.into_iter().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    match thread_cap() {
        Some(1) => map_seq(items, f),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| items.into_par_iter().map(f).collect()),
            Err(e) => {
                log::warn!("thread pool with {n} workers unavailable ({e}); running sequentially");
                map_seq(items, f)
            }
        },
        None => items.into_par_iter().map(f).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    F: Fn(T) -> R,
{
    map_seq(items, f)
}
