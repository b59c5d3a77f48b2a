//! Indexed map execution: rayon when the `parallel` feature is on,
//! sequential otherwise.
//!
//! All parallel work in this crate goes through [`map_indexed`] so that
//! results never depend on scheduling: the closure is pure per index,
//! output order is the index order, and any RNG a closure needs is
//! derived from (seed, index) rather than shared. `ExecMode::Sequential`
//! forces the fallback path even in a parallel build, which is what the
//! criterion benches use to compare the two.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    /// Plain sequential loop.
    Sequential,
    /// Rayon parallel iterator (falls back to sequential when the
    /// `parallel` feature is disabled).
    #[default]
    Parallel,
}

/// Maps `f` over `0..n`, preserving index order in the output.
pub fn map_indexed<U, F>(mode: ExecMode, n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Send + Sync,
{
    match mode {
        ExecMode::Sequential => (0..n).map(f).collect(),
        ExecMode::Parallel => {
            #[cfg(feature = "parallel")]
            {
                (0..n).into_par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                (0..n).map(f).collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_matches_sequential() {
        let seq = map_indexed(ExecMode::Sequential, 100, |i| (i as f64).sin());
        let par = map_indexed(ExecMode::Parallel, 100, |i| (i as f64).sin());
        assert_eq!(seq, par);
    }
}
