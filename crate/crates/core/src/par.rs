//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (on by default) the helpers dispatch to rayon
//! when asked for [`Exec::Parallel`]; without it every call runs sequentially.
//! All helpers preserve index order in their outputs, and reductions that the
//! numerics depend on are done sequentially over the collected values so that
//! results are bit-identical between the two modes.

use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution mode for the data-parallel inner loops.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    /// True when work will actually be spread over the rayon pool.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// Caps the global rayon pool. Has no effect without the `parallel` feature or
/// when the pool was already initialised.
pub fn configure_threads(threads: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        false
    }
}

/// `(0..n).map(f).collect()`, in index order.
pub fn map_range<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Applies `f(chunk_index, chunk)` to consecutive `chunk`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(exec: Exec, data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        data.par_chunks_mut(chunk).enumerate().for_each(|(k, c)| f(k, c));
        return;
    }
    let _ = exec;
    data.chunks_mut(chunk).enumerate().for_each(|(k, c)| f(k, c));
}

/// Like [`for_each_chunk_mut`] but collects one value per chunk, in chunk order.
/// Chunk boundaries do not depend on the thread count, so a sequential fold
/// over the result is reproducible.
pub fn map_chunks_mut<T, R, F>(exec: Exec, data: &mut [T], chunk: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, &mut [T]) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return data.par_chunks_mut(chunk).enumerate().map(|(k, c)| f(k, c)).collect();
    }
    let _ = exec;
    data.chunks_mut(chunk).enumerate().map(|(k, c)| f(k, c)).collect()
}

/// Maximum of `f(i)` over `0..n` with the smallest index winning ties.
/// Returns `None` for an empty range. NaN values are ignored.
pub fn argmax_range<F>(exec: Exec, n: usize, f: F) -> Option<(usize, f64)>
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    fn pick(a: Option<(usize, f64)>, b: Option<(usize, f64)>) -> Option<(usize, f64)> {
        match (a, b) {
            (None, x) | (x, None) => x,
            (Some(a), Some(b)) => {
                if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) {
                    Some(b)
                } else {
                    Some(a)
                }
            }
        }
    }
    let lift = |i: usize| {
        let v = f(i);
        if v.is_nan() {
            None
        } else {
            Some((i, v))
        }
    };
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return (0..n).into_par_iter().map(lift).reduce(|| None, pick);
    }
    let _ = exec;
    (0..n).map(lift).fold(None, pick)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let f = |i: usize| ((i * 37) % 11) as f64;
        for exec in [Exec::Sequential, Exec::Parallel] {
            assert_eq!(map_range(exec, 5, |i| i * i), vec![0, 1, 4, 9, 16]);
            let (i, v) = argmax_range(exec, 100, f).unwrap();
            assert_eq!(v, 10.0);
            assert_eq!(i, (0..100).find(|&k| f(k) == 10.0).unwrap());
            let mut data = vec![1.0; 10];
            for_each_chunk_mut(exec, &mut data, 3, |k, c| c.iter_mut().for_each(|x| *x *= k as f64));
            assert_eq!(data, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 3.0]);
        }
        assert!(argmax_range(Exec::Sequential, 0, |_| 1.0).is_none());
    }
}
