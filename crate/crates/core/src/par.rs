//! Data-parallel execution helpers.
//!
//! With the `parallel` feature (on by default) the per-cell loops of the
//! interpolators and the convolution kernels run on the rayon pool. Without
//! it, or when a caller asks for [`Parallelism::Sequential`], the same
//! closures run in order on the calling thread. Every helper writes each
//! output slot from exactly one closure invocation, so results are
//! bit-identical between the two modes.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    Parallel,
}

/// `Parallel` when the feature is on and the rayon pool has more than one
/// thread; on a single thread the fork-join overhead buys nothing.
impl Default for Parallelism {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        if rayon::current_num_threads() > 1 {
            return Parallelism::Parallel;
        }
        Parallelism::Sequential
    }
}

impl Parallelism {
    /// Whether work will actually be spread over threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Parallel
    }
}

/// Evaluates `f(i)` for `i in 0..n`, returning the results in index order.
pub fn map_range<T, F>(par: Parallelism, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if par.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = par;
    (0..n).map(f).collect()
}

/// Calls `f(chunk_index, chunk)` for consecutive `chunk_len`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(par: Parallelism, data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk_len > 0, "chunk length must be positive");
    #[cfg(feature = "parallel")]
    if par.is_parallel() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = par;
    data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}
