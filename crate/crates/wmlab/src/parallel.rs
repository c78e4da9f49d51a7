//! Indexed data-parallel map with a sequential fallback.
//!
//! Everything fan-out shaped in this crate goes through `run_indexed`, which
//! returns results in index order. Combined with per-index counter-based rng
//! streams, that makes outputs identical whether the `parallel` feature is
//! on or off and whatever the worker count is.

use crate::error::{Error, Result};

#[cfg(feature = "parallel")]
pub fn run_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn run_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// True when this build fans work out over a thread pool.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// Run `body` on a dedicated pool with exactly `threads` workers. `None`
/// keeps the default global pool; sequential builds accept any positive
/// count and just run inline.
#[cfg(feature = "parallel")]
pub fn with_thread_count<R, F>(threads: Option<usize>, body: F) -> Result<R>
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    match threads {
        None => Ok(body()),
        Some(0) => Err(Error::InvalidParam("thread count must be at least 1".into())),
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::Config(format!("failed to build thread pool: {e}")))?;
            Ok(pool.install(body))
        }
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_thread_count<R, F>(threads: Option<usize>, body: F) -> Result<R>
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    if threads == Some(0) {
        return Err(Error::InvalidParam("thread count must be at least 1".into()));
    }
    Ok(body())
}
