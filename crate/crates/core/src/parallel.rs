//! Data-parallel helpers. With the `parallel` feature the work is spread over
//! the rayon pool; without it the same closures run in a plain loop. Results
//! always come back in index order, so any reduction the caller performs over
//! them is independent of the thread count.

use std::ops::Range;

/// How a data-parallel loop is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Uses rayon when the `parallel` feature is enabled, otherwise sequential.
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

/// Applies `f` to consecutive ranges of at most `chunk` indices covering `0..len`.
pub fn map_chunks<R, F>(exec: Execution, len: usize, chunk: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(Range<usize>) -> R + Sync + Send,
{
    let chunk = chunk.max(1);
    let n = len.div_ceil(chunk);
    map_indexed(exec, n, |c| f(c * chunk..((c + 1) * chunk).min(len)))
}

/// Applies `f` to every index in `0..n`.
pub fn map_indexed<R, F>(exec: Execution, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_range_in_order() {
        let seq = map_chunks(Execution::Sequential, 10, 4, |r| r);
        assert_eq!(seq, vec![0..4, 4..8, 8..10]);
        let par = map_chunks(Execution::Parallel, 10, 4, |r| r);
        assert_eq!(seq, par);
        assert!(map_chunks(Execution::Parallel, 0, 4, |r| r).is_empty());
    }

    #[test]
    fn ordered_reduction_matches_across_modes() {
        let f = |i: usize| (i as f64).sqrt() * 1e-3;
        let a: f64 = map_indexed(Execution::Sequential, 1000, f).iter().sum();
        let b: f64 = map_indexed(Execution::Parallel, 1000, f).iter().sum();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
