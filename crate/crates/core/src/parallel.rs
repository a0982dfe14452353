//! Data-parallel execution with a sequential fallback.
//!
//! Every parallel helper here writes each output slot from exactly one task
//! and never reorders a floating-point reduction, so results are
//! bit-identical between [`Exec::Sequential`] and [`Exec::Parallel`].
//!
//! Without the `parallel` feature the parallel mode silently degrades to the
//! sequential loop.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

static MODE: AtomicU8 = AtomicU8::new(if cfg!(feature = "parallel") { 1 } else { 0 });

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "FFLOW_THREADS";

impl Exec {
    /// Process-wide mode used by the tensor kernels.
    pub fn current() -> Exec {
        if MODE.load(Ordering::Relaxed) == 1 {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }

    pub fn set_current(exec: Exec) {
        MODE.store(matches!(exec, Exec::Parallel) as u8, Ordering::Relaxed);
    }
}

/// Sizes the global worker pool from `FFLOW_THREADS`, if set. A value of 1
/// switches the kernels to sequential mode.
pub fn init_from_env() {
    let Some(n) = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
    else {
        return;
    };
    if n <= 1 {
        Exec::set_current(Exec::Sequential);
        return;
    }
    #[cfg(feature = "parallel")]
    {
        // a second initialisation attempt is harmless
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

/// `(0..n).map(f).collect()`, possibly in parallel; output order is the index order.
pub fn map_indexed<R, F>(exec: Exec, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel if n > 1 => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Runs `f(chunk_index, chunk)` over consecutive `chunk`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(exec: Exec, data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel if data.len() > chunk => {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
        }
        _ => data
            .chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let f = |i: usize| (i as f32 * 0.1).sin();
        assert_eq!(
            map_indexed(Exec::Sequential, 1000, f),
            map_indexed(Exec::Parallel, 1000, f)
        );
        let mut a = vec![0.0f32; 97];
        let mut b = a.clone();
        let g = |i: usize, c: &mut [f32]| c.iter_mut().for_each(|x| *x = i as f32);
        for_each_chunk_mut(Exec::Sequential, &mut a, 10, g);
        for_each_chunk_mut(Exec::Parallel, &mut b, 10, g);
        assert_eq!(a, b);
    }
}
