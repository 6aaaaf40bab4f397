//! Round trips of every on-disk format through the public API.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sparsearch::latency::{
    build_table, read_table, synthetic_bench, write_table, Provenance, DEFAULT_GRID,
};
use sparsearch::search::ObservationStore;
use sparsearch::search_space::PruningScheme;
use sparsearch::sparse::{make_mask, read_bcs, write_bcs, BcsMatrix, MaskParams};
use sparsearch::supernet::{Supernet, SupernetConfig};
use sparsearch::tensor::{read_tensors, write_tensors, Tensor};

fn scheme() -> impl Strategy<Value = PruningScheme> {
    prop_oneof![
        Just(PruningScheme::Channel),
        Just(PruningScheme::Pattern),
        Just(PruningScheme::Block)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bcs_file_round_trip(
        rows in 1usize..24,
        in_ch in 1usize..6,
        s in scheme(),
        ratio in 0.56f64..0.95,
        seed in any::<u64>(),
    ) {
        let cols = in_ch * 9;
        let w = Tensor::uniform(&[rows * cols], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let mask = make_mask(w.data(), rows, cols, (3, 3), s, ratio, &MaskParams::default()).unwrap();
        let dense: Vec<f32> = mask.apply(w.data()).iter().map(|&v| v as f32).collect();
        let m = BcsMatrix::encode(&dense, &mask).unwrap();
        let mut buf = Vec::new();
        write_bcs(&mut buf, &m).unwrap();
        let back = read_bcs(buf.as_slice()).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(back.decode().unwrap(), dense);
    }

    #[test]
    fn truncated_bcs_files_are_rejected(cut in 0usize..64) {
        let m = BcsMatrix::from_dense(&[1.0f32, 0.0, 2.0, 0.0, 0.0, 3.0], 2, 3).unwrap();
        let mut buf = Vec::new();
        write_bcs(&mut buf, &m).unwrap();
        prop_assume!(cut < buf.len());
        prop_assert!(read_bcs(&buf[..cut]).is_err());
    }

    #[test]
    fn tensor_checkpoint_round_trip(dims in prop::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
        let t = Tensor::uniform(&dims, -3.0, 3.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("w".to_string(), &t)]).unwrap();
        let back = read_tensors(buf.as_slice()).unwrap();
        prop_assert_eq!(back.len(), 1);
        prop_assert_eq!(&back[0].0, "w");
        prop_assert_eq!(back[0].1.shape(), t.shape());
        prop_assert!(back[0].1.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn latency_table_round_trip() {
    let cfg = SupernetConfig { cells: 2, ..SupernetConfig::default() };
    let table = build_table(
        synthetic_bench,
        &cfg.layer_descriptors().unwrap(),
        &DEFAULT_GRID,
        1,
        "synthetic",
        Provenance::Synthetic,
    )
    .unwrap();
    let mut buf = Vec::new();
    write_table(&mut buf, &table).unwrap();
    let back = read_table(buf.as_slice()).unwrap();
    assert_eq!(back, table);
    assert!(back.is_monotone());
}

#[test]
fn store_and_supernet_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = ObservationStore::new();
    store.push(vec![1, 0, 0, 1], 21.5, 0.7, 0).unwrap();
    store.push(vec![0, 1, 1, 0], f64::NEG_INFINITY, f64::NAN, 1).unwrap();
    let path = dir.path().join("s.store");
    store.save(&path, &["header".to_string()]).unwrap();
    let back = ObservationStore::load(&path).unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(back.best().unwrap().bits, vec![1, 0, 0, 1]);

    let sn = Supernet::new(SupernetConfig::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let p = dir.path().join("sn.sptc");
    sn.save(&p).unwrap();
    let loaded = Supernet::load(&p).unwrap();
    assert_eq!(loaded.param_names(), sn.param_names());
    for (a, b) in loaded.params().iter().zip(sn.params()) {
        assert_eq!(a.data(), b.data());
    }
}
