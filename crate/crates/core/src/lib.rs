//! Latency-aware joint architecture and pruning search.
//!
//! The crate is organised bottom-up: a small differentiable [`tensor`] engine,
//! the candidate [`search_space`], compiler-aware [`latency`] tables, the
//! [`sparse`] block-compressed storage and kernels, [`pruning`], the
//! single-path [`supernet`], reward [`predictor`] ensembles, the Bayesian
//! [`search`] loop and the genetic kernel [`autotune`]r.

pub mod autotune;
pub mod latency;
pub mod nn;
pub mod predictor;
pub mod pruning;
pub mod search;
pub mod search_space;
pub mod sparse;
pub mod stats;
pub mod supernet;
pub mod tensor;

/// Order-preserving parallel map over `0..n` on the global rayon pool.
pub(crate) fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}
