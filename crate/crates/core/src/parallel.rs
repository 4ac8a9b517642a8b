//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper preserves item order, and reductions are always performed by
//! the caller in index order, so results are bit-identical with and without
//! the `parallel` feature.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Environment variable that caps the worker thread count.
pub const THREADS_ENV: &str = "EDGEUDA_THREADS";

/// Applies `f(index, chunk)` to consecutive `chunk_len`-sized chunks of `out`.
pub fn for_each_chunk_mut<F>(out: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    if chunk_len == 0 || out.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    out.par_chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
    #[cfg(not(feature = "parallel"))]
    out.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Evaluates `f(0..n)` and returns the results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Configures the global pool from `EDGEUDA_THREADS`, if set.
///
/// Returns the effective thread count. Calling it more than once is harmless;
/// only the first successful configuration takes effect.
pub fn init_from_env() -> usize {
    let requested = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0);
    #[cfg(feature = "parallel")]
    {
        if let Some(n) = requested {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = requested;
        1
    }
}
