//! Seeded operands shared by the kernel benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsearch::search_space::PruningScheme;
use sparsearch::sparse::{make_mask, BcsMatrix, MaskParams};

/// GEMM view of a 3×3 convolution: `out × in·9` weights, `in·9 × h·w` input.
#[derive(Debug, Clone, Copy)]
pub struct ConvGemm {
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGemm {
    /// 24→48 channels on a 320×180 feature map.
    pub const REFERENCE: ConvGemm = ConvGemm { in_ch: 24, out_ch: 48, h: 180, w: 320 };

    pub fn rows(&self) -> usize {
        self.out_ch
    }

    pub fn k(&self) -> usize {
        self.in_ch * 9
    }

    pub fn n(&self) -> usize {
        self.h * self.w
    }
}

pub struct Operands {
    pub dense: Vec<f32>,
    pub input: Vec<f32>,
}

pub fn operands(shape: ConvGemm, seed: u64) -> Operands {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Operands {
        dense: (0..shape.rows() * shape.k()).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        input: (0..shape.k() * shape.n()).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
    }
}

/// Magnitude-masked BCS copy of `dense`.
pub fn pruned(shape: ConvGemm, dense: &[f32], scheme: PruningScheme, ratio: f64) -> BcsMatrix<f32> {
    let w: Vec<f64> = dense.iter().map(|&v| v as f64).collect();
    let mask = make_mask(&w, shape.rows(), shape.k(), (3, 3), scheme, ratio, &MaskParams::default())
        .expect("valid mask parameters");
    let kept: Vec<f32> = dense.iter().zip(&mask.keep).map(|(&v, &k)| if k { v } else { 0.0 }).collect();
    BcsMatrix::encode(&kept, &mask).expect("mask matches shape")
}
