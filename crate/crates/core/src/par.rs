//! Data-parallel map with a sequential fallback.
//!
//! Every batch-level loop in the crate (per-sequence gradients, evaluation
//! matrices, repeated administrations) goes through [`map_indexed`]. Results
//! always come back in input order and are reduced sequentially by the
//! caller, so both modes produce bit-identical numbers.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    Sequential,
    /// Rayon work-stealing when the `parallel` feature is enabled;
    /// otherwise identical to `Sequential`.
    #[default]
    Parallel,
}

impl ExecMode {
    pub fn is_parallel_available() -> bool {
        cfg!(feature = "parallel")
    }
}

/// Applies `f` to every item and collects the results in order.
pub fn map_indexed<T, R, F>(mode: ExecMode, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
        }
        _ => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_preserve_order() {
        let items: Vec<u64> = (0..257).collect();
        let f = |i: usize, x: &u64| (i as u64) * 31 + x * x;
        let a = map_indexed(ExecMode::Sequential, &items, f);
        let b = map_indexed(ExecMode::Parallel, &items, f);
        assert_eq!(a, b);
        assert_eq!(a[3], 3 * 31 + 9);
    }
}
