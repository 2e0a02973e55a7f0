//! Sequential / rayon execution with deterministic ordered reduction.
//!
//! Every parallel map collects results in input order and every reduction
//! folds them left to right, so the `Parallel` and `Sequential` modes agree
//! bit for bit.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Number of items folded together before chunk partial sums are combined.
/// Fixed so that summation order never depends on the thread count.
pub const REDUCE_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Uses rayon when the `parallel` feature is enabled, otherwise falls
    /// back to sequential execution.
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }

    /// Maps `f` over `0..n`, returning results in index order.
    pub fn map_indexed<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Maps `f` over a slice, returning results in slice order.
    pub fn map<I, T, F>(self, items: &[I], f: F) -> Vec<T>
    where
        I: Sync,
        T: Send,
        F: Fn(&I) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }

    /// Sums `f(item)` (vectors of length `dim`) over `items`.
    ///
    /// Items are grouped into fixed chunks of [`REDUCE_CHUNK`]; each chunk
    /// is summed sequentially and the chunk sums are then added in order.
    pub fn sum_vectors<I, F>(self, items: &[I], dim: usize, f: F) -> Vec<f64>
    where
        I: Sync,
        F: Fn(&I, &mut [f64]) + Sync + Send,
    {
        let chunks: Vec<&[I]> = items.chunks(REDUCE_CHUNK).collect();
        let partials = self.map(&chunks, |chunk| {
            let mut acc = vec![0.0; dim];
            for item in chunk.iter() {
                f(item, &mut acc);
            }
            acc
        });
        let mut total = vec![0.0; dim];
        for partial in &partials {
            for (t, p) in total.iter_mut().zip(partial) {
                *t += p;
            }
        }
        total
    }

    /// Sums scalar `f(item)` over `items` with the same chunking as
    /// [`Execution::sum_vectors`].
    pub fn sum_scalars<I, F>(self, items: &[I], f: F) -> f64
    where
        I: Sync,
        F: Fn(&I) -> f64 + Sync + Send,
    {
        let chunks: Vec<&[I]> = items.chunks(REDUCE_CHUNK).collect();
        self.map(&chunks, |chunk| chunk.iter().map(&f).sum::<f64>())
            .into_iter()
            .sum()
    }
}
