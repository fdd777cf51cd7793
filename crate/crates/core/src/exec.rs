//! Execution policy for data-parallel loops.

use serde::{Deserialize, Serialize};

/// How data-parallel loops are executed.
///
/// `Parallel` uses rayon when the crate is built with the `parallel`
/// feature and silently degrades to `Sequential` otherwise. Every helper
/// returns results in input order, so downstream reductions are
/// order-stable and both policies give identical bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
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
    /// True when this policy actually fans out to worker threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// Maps `f` over `items`, preserving order.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }

    /// Maps `f` over `0..n`, preserving order.
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Splits `0..n` into fixed-size chunks, runs `f` on each chunk and
    /// returns the per-chunk results in chunk order.
    ///
    /// Chunk boundaries depend only on `n` and `chunk`, never on the thread
    /// count, which is what keeps chunked reductions deterministic.
    pub fn map_chunks<R, F>(self, n: usize, chunk: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(std::ops::Range<usize>) -> R + Sync + Send,
    {
        let chunk = chunk.max(1);
        let n_chunks = n.div_ceil(chunk);
        self.map_range(n_chunks, |c| f(c * chunk..((c + 1) * chunk).min(n)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let xs: Vec<u64> = (0..1000).collect();
        let seq = Exec::Sequential.map(&xs, |x| x * 3);
        let par = Exec::Parallel.map(&xs, |x| x * 3);
        assert_eq!(seq, par);
        assert_eq!(seq[999], 2997);
    }

    #[test]
    fn chunks_cover_range_exactly() {
        let ranges = Exec::Parallel.map_chunks(10, 4, |r| r);
        assert_eq!(ranges, vec![0..4, 4..8, 8..10]);
        assert!(Exec::Sequential.map_chunks(0, 4, |r| r).is_empty());
    }

    #[test]
    fn chunked_float_sum_is_policy_independent() {
        let xs: Vec<f32> = (0..10_000).map(|i| (i as f32).sin() * 1e-3).collect();
        let sum = |exec: Exec| -> f32 {
            exec.map_chunks(xs.len(), 64, |r| xs[r].iter().sum::<f32>())
                .into_iter()
                .sum()
        };
        assert_eq!(
            sum(Exec::Sequential).to_bits(),
            sum(Exec::Parallel).to_bits()
        );
    }
}
