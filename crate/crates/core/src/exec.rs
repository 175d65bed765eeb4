//! Execution strategy for the data-parallel inner loops.
//!
//! With the `parallel` feature (default) [`Exec::Parallel`] dispatches to rayon;
//! without it every strategy runs on the calling thread. Results never depend on
//! the strategy: work is split into index-ordered pieces and reductions happen
//! sequentially in index order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Fixed number of accumulation chunks for reductions, independent of the
/// thread count.
pub const REDUCTION_CHUNKS: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// Whether this strategy actually fans out to worker threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// Evaluates `f(i)` for `i in 0..n`, returning results in index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Maps over a slice, preserving order.
    pub fn map_slice<'a, S, T, F>(self, items: &'a [S], f: F) -> Vec<T>
    where
        S: Sync,
        T: Send,
        F: Fn(&'a S) -> T + Sync + Send,
    {
        self.map(items.len(), |i| f(&items[i]))
    }

    /// Splits `0..n` into at most [`REDUCTION_CHUNKS`] contiguous ranges, runs
    /// `f` on each and returns the per-chunk results in range order.
    pub fn map_chunks<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
    {
        let ranges = chunk_ranges(n, REDUCTION_CHUNKS);
        self.map(ranges.len(), |c| f(ranges[c].clone()))
    }
}

pub(crate) fn chunk_ranges(n: usize, chunks: usize) -> Vec<std::ops::Range<usize>> {
    if n == 0 {
        return Vec::new();
    }
    let chunks = chunks.clamp(1, n);
    let base = n / chunks;
    let extra = n % chunks;
    let mut out = Vec::with_capacity(chunks);
    let mut start = 0;
    for c in 0..chunks {
        let len = base + usize::from(c < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_range_in_order() {
        for n in [0, 1, 5, 8, 9, 100] {
            let r = chunk_ranges(n, REDUCTION_CHUNKS);
            let flat: Vec<usize> = r.into_iter().flatten().collect();
            assert_eq!(flat, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn strategies_agree() {
        let f = |i: usize| (i as f64).sin() * 1e3;
        assert_eq!(Exec::Sequential.map(257, f), Exec::Parallel.map(257, f));
    }
}
