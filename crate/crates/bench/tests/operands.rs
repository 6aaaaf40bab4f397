//! The benchmark operands compute the same product as the dense kernel.

use sparsearch::search_space::PruningScheme;
use sparsearch::sparse::{dense_gemm, spmm, KernelConfig};
use sparsearch_bench::{operands, pruned, ConvGemm};

#[test]
fn pruned_operands_match_dense_product() {
    let shape = ConvGemm { in_ch: 3, out_ch: 8, h: 6, w: 5 };
    let ops = operands(shape, 11);
    let cfg = KernelConfig::default();
    for scheme in PruningScheme::ALL {
        let m = pruned(shape, &ops.dense, scheme, 0.75);
        let kept = m.decode().unwrap();
        let want = dense_gemm(&kept, shape.rows(), shape.k(), &ops.input, shape.n(), &cfg).unwrap();
        let got = spmm(&m, &ops.input, shape.n(), &cfg).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0), "{scheme:?}: {a} vs {b}");
        }
        assert!(m.nnz() < ops.dense.len());
    }
}

#[test]
fn reference_shape_dimensions() {
    let r = ConvGemm::REFERENCE;
    assert_eq!((r.rows(), r.k(), r.n()), (48, 216, 57600));
}
