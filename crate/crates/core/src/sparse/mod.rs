//! Structured sparsity masks and the block-compressed storage (BCS) format.
//!
//! Weights are handled in their GEMM view: a conv weight `[N, C, kh, kw]` is
//! the row-major `N × (C·kh·kw)` matrix, one output channel per row.

mod bcs;
mod io;
mod kernel;
mod mask;

pub use bcs::BcsMatrix;
pub use io::{read_bcs, write_bcs, BCS_MAGIC};
pub use kernel::{dense_gemm, dense_gemm_into, spmm, spmm_into, KernelConfig, STRIP};
pub use mask::{
    make_mask, pattern_floor, select_pattern, BlockAxis, BlockDims, MaskDetail, MaskParams, PatternLibrary,
    SparsityMask,
};

use std::fmt::Debug;
use std::ops::{Add, Mul};

use thiserror::Error;

use crate::search_space::PruningScheme;

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("ratio {ratio} is below the {scheme} granularity floor {floor:.4}")]
    Granularity {
        scheme: PruningScheme,
        ratio: f64,
        floor: f64,
    },
    #[error("pruning ratio {0} outside [0, 1)")]
    InvalidRatio(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("malformed BCS data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Element type of the sparse kernels.
pub trait Scalar: Copy + Default + PartialEq + Debug + Send + Sync + Add<Output = Self> + Mul<Output = Self> + 'static {
    const ZERO: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}
