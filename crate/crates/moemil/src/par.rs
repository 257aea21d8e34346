//! Data-parallel loop helpers with a sequential fallback.
//!
//! With the `parallel` feature enabled the helpers dispatch onto rayon;
//! without it they run plain loops. Results are bit-identical either way:
//! every work item owns its output slot outright and all floating-point
//! accumulation happens in a fixed order inside a single item, so neither
//! the thread count nor the split points can change a single bit.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work below this many scalar elements stays sequential; the rayon
/// dispatch overhead dwarfs the kernel at small sizes.
#[cfg(feature = "parallel")]
const PAR_MIN_ELEMS: usize = 16 * 1024;

/// Caps the global rayon pool at `MOEMIL_THREADS` threads when the
/// variable is set. Results do not depend on the setting.
pub fn configure_threads_from_env() {
    #[cfg(feature = "parallel")]
    {
        if let Ok(v) = std::env::var("MOEMIL_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n >= 1 {
                    // Ignore failure: the pool may already be initialized.
                    let _ = rayon::ThreadPoolBuilder::new()
                        .num_threads(n)
                        .build_global();
                }
            }
        }
    }
}

/// Runs `f(chunk_index, chunk)` over equally sized chunks of `data`
/// (the final chunk may be shorter).
pub(crate) fn run_chunks_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    {
        if data.len() >= PAR_MIN_ELEMS {
            data.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Collects `f(i)` for `i in 0..n`. `cost_hint` is the approximate number
/// of scalar operations per item, used to decide whether rayon is worth it.
pub(crate) fn map_indexed<R, F>(n: usize, cost_hint: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if n.saturating_mul(cost_hint) >= PAR_MIN_ELEMS && n > 1 {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    let _ = cost_hint;
    (0..n).map(f).collect()
}
