//! End-to-end acceptance checks. Each test prints one `criterion N:` line
//! before asserting. They share a lock because several of them time kernels.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sparsearch::autotune::{ga_tune, gemm_bench, GaConfig, GemmShape, Menus};
use sparsearch::latency::{
    build_table, estimate, host_bench, min_pruning_ratios, BenchSpec, LatencyError, LatencyTable,
    LayerDescriptor, LayerType, ModelLayer, Provenance, SchemeKey, DEFAULT_GRID,
};
use sparsearch::nn::{predict, TrainConfig};
use sparsearch::predictor::{ensemble_stats, mape_loss, ucb};
use sparsearch::pruning::{one_shot_prune, reweighted_determine_ratios, short_retrain, ReweightConfig};
use sparsearch::search::{plan_candidate, random_search, run_search, Evaluation, ObservationStore, SearchConfig,
    SupernetPruneEvaluator, SyntheticLandscape};
use sparsearch::search_space::{BlockChoice, Candidate, PruningScheme};
use sparsearch::sparse::{make_mask, pattern_floor, spmm, BcsMatrix, BlockAxis, BlockDims, KernelConfig, MaskParams};
use sparsearch::stats::{median, spearman};
use sparsearch::supernet::{sample_path, texture_dataset, Supernet, SupernetConfig, SupernetTrainConfig};
use sparsearch::tensor::{AdamConfig, AdamState, ConvGeom, OptimizerKind, Tape, Tensor, Var};
use sparsearch::nn::{Dataset, Mlp, Model};

static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: usize, pass: bool, detail: String) -> bool {
    // Bypasses libtest capture so verdicts show in a plain `cargo test`.
    let line = format!("criterion {n}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    pass
}

// ---------------------------------------------------------------- 1

/// Row-major `rows × k` times `k × n` in f32, summing columns in order.
fn naive_f32(a: &[f32], x: &[f32], rows: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0f32; rows * n];
    for r in 0..rows {
        for j in 0..n {
            let mut acc = 0f32;
            for c in 0..k {
                let w = a[r * k + c];
                if w != 0.0 {
                    acc += w * x[c * n + j];
                }
            }
            out[r * n + j] = acc;
        }
    }
    out
}

#[test]
fn bcs_round_trip_and_spmm_on_random_masks() {
    let _g = serial();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let menus = Menus::default();
    let (mut exact, mut worst_rel) = (0usize, 0f64);
    let mut per_scheme = [0usize; 3];
    for case in 0..1000 {
        let scheme = PruningScheme::ALL[rng.gen_range(0..3)];
        let rows = rng.gen_range(1..=48);
        let cols = 9 * rng.gen_range(1..=12);
        let ratio = match scheme {
            // pattern masks cannot realise ratios between 0 and the floor
            PruningScheme::Pattern if rng.gen_bool(0.1) => 0.0,
            PruningScheme::Pattern => rng.gen_range(pattern_floor()..0.95),
            _ => rng.gen_range(0.0..0.95),
        };
        let params = MaskParams {
            block: BlockDims {
                p: rng.gen_range(1..=8),
                q: rng.gen_range(1..=8),
                axis: if rng.gen() { BlockAxis::Column } else { BlockAxis::Row },
            },
            ..MaskParams::default()
        };
        let w: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mask = make_mask(&w, rows, cols, (3, 3), scheme, ratio, &params)
            .unwrap_or_else(|e| panic!("case {case}: {scheme:?} {ratio}: {e}"));
        let masked: Vec<f32> = mask.apply(&w).iter().map(|&v| v as f32).collect();
        let m = BcsMatrix::encode(&masked, &mask).unwrap();
        let back = m.decode().unwrap();
        let bit_exact = back.len() == masked.len() && back.iter().zip(&masked).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(bit_exact, "case {case}: round trip changed bits");
        exact += 1;
        per_scheme[scheme.index()] += 1;

        let n = rng.gen_range(1..=70);
        let x: Vec<f32> = (0..cols * n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let cfg = menus.random(&mut rng);
        let got = spmm(&m, &x, n, &cfg).unwrap();
        let want = naive_f32(&masked, &x, rows, cols, n);
        for (a, b) in got.iter().zip(&want) {
            let rel = (*a as f64 - *b as f64).abs() / (b.abs() as f64).max(f32::MIN_POSITIVE as f64);
            worst_rel = worst_rel.max(rel);
        }
    }
    let el = t0.elapsed();
    let pass = exact == 1000 && worst_rel <= 1e-6 && el < Duration::from_secs(60);
    assert!(verdict(
        1,
        pass,
        format!("{exact}/1000 bit-exact (channel/pattern/block {per_scheme:?}), max spmm rel err {worst_rel:.2e}, {el:.1?}")
    ));
}

// ---------------------------------------------------------------- 2

#[test]
fn block_speedup_on_reference_shape() {
    let _g = serial();
    let t0 = Instant::now();
    let desc = LayerDescriptor::new(LayerType::Conv3x3, 24, 48, 180, 320).unwrap();
    let raw: RefCell<BTreeMap<(SchemeKey, u64), Vec<f64>>> = RefCell::default();
    let mut timer = host_bench(BenchSpec::default());
    let bench = |d: &LayerDescriptor, k: SchemeKey, r: f64| {
        let ms = timer(d, k, r)?;
        raw.borrow_mut().entry((k, r.to_bits())).or_default().push(ms);
        Ok(ms)
    };
    let table = build_table(bench, &[desc], &DEFAULT_GRID, 50, "host", Provenance::Measured).unwrap();
    let raw = raw.into_inner();
    let raw_dense = median(&raw[&(SchemeKey::Dense, 0f64.to_bits())]).unwrap();

    let mut monotone = true;
    let mut raw_violations = 0;
    let mut lines = Vec::new();
    let mut block_09 = 0.0;
    for s in PruningScheme::ALL {
        let series = table.series(&desc, s).unwrap();
        let dense = series[0].1;
        let speedups: Vec<f64> = series.iter().map(|&(_, ms)| dense / ms).collect();
        monotone &= speedups[0] == 1.0 && speedups.windows(2).all(|w| w[1] >= w[0]);
        let mut prev = 1.0;
        for &(r, _) in &series[1..] {
            let sp = raw_dense / median(&raw[&(SchemeKey::Sparse(s), r.to_bits())]).unwrap();
            if sp < prev {
                raw_violations += 1;
            }
            prev = sp;
        }
        if s == PruningScheme::Block {
            block_09 = series.iter().find(|e| (e.0 - 0.9).abs() < 1e-9).map(|e| dense / e.1).unwrap();
        }
        lines.push(format!("{}@max={:.2}", s.name(), speedups.last().unwrap()));
    }
    let el = t0.elapsed();
    let pass = block_09 > 1.0 && monotone && el < Duration::from_secs(300);
    assert!(verdict(
        2,
        pass,
        format!(
            "block@0.9 speedup {block_09:.2}, monotone={monotone} ({raw_violations} raw-median inversions before clamping), {}, {el:.1?}",
            lines.join(" ")
        )
    ));
}

// ---------------------------------------------------------------- 3

type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

/// Builds `op(inputs)`, projects it onto a fixed random tensor and sums.
fn projected(inputs: &[Tensor], f: &Build) -> (Tape, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(shape.iter().fold(7, |h, &d| h * 31 + d as u64));
    let proj = Tensor::uniform(&shape, -1.0, 1.0, &mut rng);
    let p = tape.constant(proj);
    let m = tape.mul(out, p).unwrap();
    let loss = tape.sum(m);
    (tape, vars, loss)
}

fn max_grad_error(inputs: &[Tensor], f: &Build) -> f64 {
    let (tape, vars, loss) = projected(inputs, f);
    let grads = tape.backward(loss);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("leaf gradient").to_vec();
        for j in 0..inputs[i].len() {
            let eval = |delta: f64| {
                let mut xs = inputs.to_vec();
                xs[i].data_mut()[j] += delta;
                let (t, _, l) = projected(&xs, f);
                t.value(l).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let denom = analytic[j].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic[j] - numeric).abs() / denom);
        }
    }
    worst
}

/// Values bounded away from zero so kinks are never crossed by the probe.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(0.2..1.0) * if rng.gen() { 1.0 } else { -1.0 })
}

#[test]
fn tape_gradients_match_central_differences() {
    let _g = serial();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut u = |s: &[usize]| Tensor::uniform(s, -1.0, 1.0, &mut rng);
    let coeffs: Vec<f64> = (0..6).map(|i| 0.5 + i as f64 * 0.25).collect();
    let mut cases: Vec<(&str, Vec<Tensor>, Box<Build>)> = vec![
        ("matmul", vec![u(&[3, 4]), u(&[4, 5])], Box::new(|t, v| t.matmul(v[0], v[1]).unwrap())),
        ("transpose", vec![u(&[3, 4])], Box::new(|t, v| t.transpose(v[0]).unwrap())),
        ("add", vec![u(&[2, 3]), u(&[2, 3])], Box::new(|t, v| t.add(v[0], v[1]).unwrap())),
        ("sub", vec![u(&[2, 3]), u(&[2, 3])], Box::new(|t, v| t.sub(v[0], v[1]).unwrap())),
        ("mul", vec![u(&[2, 3]), u(&[2, 3])], Box::new(|t, v| t.mul(v[0], v[1]).unwrap())),
        ("scale", vec![u(&[2, 3])], Box::new(|t, v| t.scale(v[0], -1.7))),
        ("sum", vec![u(&[2, 3])], Box::new(|t, v| t.sum(v[0]))),
        ("mean", vec![u(&[2, 3])], Box::new(|t, v| t.mean(v[0]))),
        ("mse", vec![u(&[2, 3]), u(&[2, 3])], Box::new(|t, v| t.mse(v[0], v[1]).unwrap())),
        (
            "weighted_squares",
            vec![u(&[2, 3])],
            Box::new(move |t, v| t.weighted_squares(v[0], coeffs.clone()).unwrap()),
        ),
        ("add_bias/2", vec![u(&[3, 4]), u(&[4])], Box::new(|t, v| t.add_bias(v[0], v[1]).unwrap())),
        ("add_bias/3", vec![u(&[2, 3, 3]), u(&[2])], Box::new(|t, v| t.add_bias(v[0], v[1]).unwrap())),
        ("add_bias/4", vec![u(&[2, 3, 2, 2]), u(&[3])], Box::new(|t, v| t.add_bias(v[0], v[1]).unwrap())),
        (
            "conv2d/3x3",
            vec![u(&[2, 5, 5]), u(&[3, 2, 3, 3])],
            Box::new(|t, v| t.conv2d(v[0], v[1], ConvGeom::same(3)).unwrap()),
        ),
        (
            "conv2d/batch",
            vec![u(&[2, 2, 4, 4]), u(&[3, 2, 3, 3])],
            Box::new(|t, v| t.conv2d(v[0], v[1], ConvGeom::same(3)).unwrap()),
        ),
        (
            "conv2d/stride2",
            vec![u(&[2, 6, 5]), u(&[2, 2, 3, 3])],
            Box::new(|t, v| t.conv2d(v[0], v[1], ConvGeom { stride: 2, pad: 1 }).unwrap()),
        ),
        (
            "conv2d/1x1",
            vec![u(&[3, 4, 4]), u(&[2, 3, 1, 1])],
            Box::new(|t, v| t.conv2d(v[0], v[1], ConvGeom::same(1)).unwrap()),
        ),
        (
            "conv2d/5x5",
            vec![u(&[1, 5, 6]), u(&[2, 1, 5, 5])],
            Box::new(|t, v| t.conv2d(v[0], v[1], ConvGeom::same(5)).unwrap()),
        ),
        ("pixel_shuffle/3", vec![u(&[8, 2, 3])], Box::new(|t, v| t.pixel_shuffle(v[0], 2).unwrap())),
        ("pixel_shuffle/4", vec![u(&[2, 4, 2, 2])], Box::new(|t, v| t.pixel_shuffle(v[0], 2).unwrap())),
        ("upsample_nearest", vec![u(&[2, 2, 3])], Box::new(|t, v| t.upsample_nearest(v[0], 2).unwrap())),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(304);
    cases.push(("relu", vec![away_from_zero(&[3, 4], &mut rng)], Box::new(|t, v| t.relu(v[0]))));
    cases.push(("abs", vec![away_from_zero(&[3, 4], &mut rng)], Box::new(|t, v| t.abs(v[0]))));
    cases.push((
        "composite",
        vec![u_fixed(&[2, 4, 4], 305), u_fixed(&[4, 2, 3, 3], 306), u_fixed(&[4], 307)],
        Box::new(|t, v| {
            let c = t.conv2d(v[0], v[1], ConvGeom::same(3)).unwrap();
            let b = t.add_bias(c, v[2]).unwrap();
            let s = t.pixel_shuffle(b, 2).unwrap();
            let up = t.upsample_nearest(s, 1).unwrap();
            t.scale(up, 0.5)
        }),
    ));

    let mut worst = ("", 0.0f64);
    let mut fails = Vec::new();
    for (name, inputs, f) in &cases {
        let e = max_grad_error(inputs, f.as_ref());
        if e >= 1e-4 {
            fails.push(format!("{name}={e:.2e}"));
        }
        if e > worst.1 {
            worst = (name, e);
        }
    }
    let el = t0.elapsed();
    let pass = fails.is_empty() && el < Duration::from_secs(60);
    assert!(verdict(
        3,
        pass,
        format!("{} ops, worst {} rel err {:.2e}, failures {fails:?}, {el:.1?}", cases.len(), worst.0, worst.1)
    ));
}

fn u_fixed(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

// ---------------------------------------------------------------- 4

#[test]
fn predictor_formulas_match_hand_values() {
    let _g = serial();
    let t0 = Instant::now();
    let mape = mape_loss(&[30.0], &[32.0], 50.0).unwrap();
    let s4 = ensemble_stats(&[1.0, 2.0, 3.0, 4.0]).unwrap();
    let s3 = ensemble_stats(&[30.0, 32.0, 34.0]).unwrap();
    let checks = [
        ("mape", mape, 1.0 / 9.0),
        ("mean4", s4.mean, 2.5),
        ("std4", s4.std, 1.2909944487358056),
        ("ucb4", ucb(s4, 0.5), 3.1454972243679028),
        ("mean3", s3.mean, 32.0),
        ("std3", s3.std, 2.0),
        ("ucb3", ucb(s3, 0.5), 33.0),
    ];
    let worst = checks.iter().map(|(_, a, b)| (a - b).abs()).fold(0.0, f64::max);
    let el = t0.elapsed();
    let pass = worst <= 1e-12 && el < Duration::from_secs(1);
    assert!(verdict(4, pass, format!("mape={mape:.15}, max abs deviation {worst:.1e} over {} values, {el:.1?}", checks.len())));
}

// ---------------------------------------------------------------- 5

#[test]
fn search_finds_near_optimum_and_beats_random() {
    let _g = serial();
    let t0 = Instant::now();
    let space = SupernetConfig { cells: 2, ..SupernetConfig::default() }.search_space();
    let size = space.size();
    assert_eq!(size, 324);
    let land = SyntheticLandscape::new(&space, 2024);
    let (_, opt) = land.optimum().unwrap();
    let eval = |c: &Candidate, _seed: u64| {
        Ok(Evaluation {
            reward: land.reward(c),
            latency_ms: 0.0,
        })
    };
    let (mut bo, mut rs) = (Vec::new(), Vec::new());
    let mut within = 0;
    let mut max_evals = 0;
    for seed in 0..10 {
        let cfg = SearchConfig {
            warm_start: 20,
            steps: 7,
            seed,
            ..SearchConfig::default()
        };
        let mut store = ObservationStore::new();
        let out = run_search(&cfg, &space, &eval, &mut store, |_, _| Ok(())).unwrap();
        let best = out.best.unwrap().reward;
        let budget = store.len();
        max_evals = max_evals.max(budget);
        let random = random_search(&space, &eval, budget, seed).unwrap().best().unwrap().reward;
        if (opt - best) <= 0.01 * opt.abs() {
            within += 1;
        }
        bo.push(best);
        rs.push(random);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mb, mr) = (mean(&bo), mean(&rs));
    let el = t0.elapsed();
    let pass = within == 10 && 4 * max_evals as u128 <= size && mb > mr && el < Duration::from_secs(300);
    assert!(verdict(
        5,
        pass,
        format!(
            "optimum {opt:.4}, {within}/10 seeds within 1%, ≤{max_evals}/{size} evaluated, mean best {mb:.4} vs random {mr:.4}, {el:.1?}"
        )
    ));
}

// ---------------------------------------------------------------- 6

#[test]
fn supernet_weight_sharing_and_rank_fidelity() {
    let _g = serial();
    let t0 = Instant::now();
    let cfg = SupernetConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let train = texture_dataset(256, 8, 2, &mut rng).unwrap();
    let val = texture_dataset(64, 8, 2, &mut rng).unwrap();
    let mut sn = Supernet::new(cfg, &mut rng).unwrap();

    // per-batch isolation of unselected weights
    let mut adam = AdamState::new(AdamConfig::with_lr(3e-3), sn.params().len());
    let mut isolated = true;
    for step in 0..24 {
        let path = sample_path(cfg.cells, &mut rng);
        let idx: Vec<usize> = (step * 8..step * 8 + 8).map(|i| i % train.len()).collect();
        let (x, y) = train.batch(&idx);
        let before: Vec<Vec<u64>> = sn.params().iter().map(|p| p.data().iter().map(|v| v.to_bits()).collect()).collect();
        sn.train_step(&path, x, y, &mut adam).unwrap();
        let active = sn.path_param_indices(&path).unwrap();
        for (i, p) in sn.params().iter().enumerate() {
            if !active.contains(&i) {
                isolated &= p.data().iter().map(|v| v.to_bits()).eq(before[i].iter().copied());
            }
        }
    }

    sn.train_single_path(&train, &SupernetTrainConfig { epochs: 10, batch_size: 16, lr: 3e-3 }, &mut rng)
        .unwrap();

    // extracted paths reproduce the supernet forward pass bit for bit
    let mut identical = 0;
    let paths: Vec<Vec<BlockChoice>> = BlockChoice::ALL
        .iter()
        .flat_map(|&a| BlockChoice::ALL.iter().map(move |&b| vec![a, b]))
        .collect();
    let probe = val.batch(&(0..8).collect::<Vec<_>>()).0;
    for p in &paths {
        let a = sn.forward(p, &probe).unwrap();
        let b = predict(&sn.extract_path(p).unwrap(), probe.clone()).unwrap();
        if a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()) {
            identical += 1;
        }
    }

    // one-shot prune + 2 epochs vs the same pruned model trained 50 epochs
    let descs = cfg.layer_descriptors().unwrap();
    let table = build_table(sparsearch::latency::synthetic_bench, &descs, &DEFAULT_GRID, 1, "synthetic", Provenance::Synthetic)
        .unwrap();
    let space = cfg.search_space();
    let all: Vec<Candidate> = space.enumerate().unwrap().collect();
    let cands: Vec<Candidate> = (0..16).map(|i| all[i * all.len() / 16].clone()).collect();
    let retrain = TrainConfig {
        epochs: 2,
        batch_size: 16,
        optimizer: OptimizerKind::Adam { lr: 2e-3 },
    };
    let (mut quick, mut full) = (Vec::new(), Vec::new());
    for c in &cands {
        let dense = estimate(&cfg.candidate_layers(c).unwrap(), &table, 0.0).unwrap().total_ms;
        let target = 0.6 * dense;
        let ev = SupernetPruneEvaluator {
            supernet: &sn,
            table: &table,
            overhead_ms: 0.0,
            target_ms: target,
            mask: MaskParams::default(),
            train: &train,
            val: &val,
            retrain,
        };
        quick.push(ev.evaluate_model(c, 1).unwrap().1.reward);
        let (_, prunes) = plan_candidate(&cfg, c, &table, 0.0, target).unwrap();
        let mut m = sn.extract_path(&c.cells).unwrap();
        let out = one_shot_prune(&mut m, &prunes, &MaskParams::default()).unwrap();
        let long = TrainConfig { epochs: 50, ..retrain };
        full.push(short_retrain(&mut m, &out.masks, &train, &val, &long, &mut ChaCha8Rng::seed_from_u64(1)).unwrap());
    }
    let rho = spearman(&quick, &full).unwrap_or(f64::NAN);
    let el = t0.elapsed();
    let pass = isolated && identical == paths.len() && rho >= 0.5 && el < Duration::from_secs(900);
    assert!(verdict(
        6,
        pass,
        format!(
            "unselected weights unchanged={isolated}, {identical}/{} paths bit-identical, spearman {rho:.3} over {} candidates, {el:.1?}",
            paths.len(),
            cands.len()
        )
    ));
}

// ---------------------------------------------------------------- 7

const FEATURES: usize = 80;
const ACTIVE: [usize; 5] = [2, 5, 9, 13, 17];

fn planted(rng: &mut ChaCha8Rng) -> Dataset {
    let n = 2000;
    let s3 = 3f64.sqrt();
    let x = Tensor::uniform(&[n, FEATURES], -s3, s3, rng);
    let mut w = vec![0.0; FEATURES];
    for g in ACTIVE {
        for j in 0..4 {
            w[g * 4 + j] = rng.gen_range(0.5..1.5) * if rng.gen() { 1.0 } else { -1.0 };
        }
    }
    let y = Tensor::from_fn(&[n, 1], |i| {
        let row = &x.data()[i * FEATURES..(i + 1) * FEATURES];
        row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + rng.gen_range(-0.01..0.01)
    });
    Dataset::new(x, y).unwrap()
}

#[test]
fn reweighted_loop_recovers_planted_support() {
    let _g = serial();
    let t0 = Instant::now();
    let expected: Vec<usize> = (0..FEATURES / 4).filter(|g| !ACTIVE.contains(g)).collect();
    let cfg = ReweightConfig {
        lambda: 1e-3,
        train: TrainConfig {
            epochs: 0,
            batch_size: 2000,
            optimizer: OptimizerKind::Sgd { lr: 0.2 },
        },
        block: BlockDims {
            p: 1,
            q: 4,
            axis: BlockAxis::Row,
        },
        ..ReweightConfig::default()
    };
    let (mut recovered, mut anti, mut inversions) = (0, 0, 0);
    let seeds = 5;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let data = planted(&mut rng);
        let mut model = Mlp::new(&[FEATURES, 1], &mut rng);
        let r = reweighted_determine_ratios(&mut model, &data, &[PruningScheme::Block], &cfg, &mut rng).unwrap();
        assert_eq!(r.state.groups[0].len(), 20);
        if r.zeroed_groups[0] == expected {
            recovered += 1;
        }
        let w = model.params()[0].data();
        let norms: Vec<f64> = r.state.groups[0].iter().map(|g| g.iter().map(|&i| w[i] * w[i]).sum()).collect();
        let alpha = &r.state.alpha[0];
        let mut ok = true;
        for i in 0..norms.len() {
            for j in 0..norms.len() {
                if norms[i] < norms[j] && alpha[i] < alpha[j] {
                    ok = false;
                    inversions += 1;
                }
            }
        }
        anti += ok as usize;
    }
    let el = t0.elapsed();
    let pass = recovered == seeds as usize && anti == seeds as usize && el < Duration::from_secs(120);
    assert!(verdict(
        7,
        pass,
        format!("support recovered {recovered}/{seeds}, alpha anti-monotone {anti}/{seeds} ({inversions} inversions), {el:.1?}")
    ));
}

// ---------------------------------------------------------------- 8

struct RandomModel {
    layers: Vec<ModelLayer>,
    table: LatencyTable,
    overhead: f64,
    target: f64,
}

fn random_model(rng: &mut ChaCha8Rng) -> RandomModel {
    let mut table = LatencyTable::new("random", Provenance::Synthetic, DEFAULT_GRID.to_vec()).unwrap();
    let n = rng.gen_range(1..=8);
    let mut layers = Vec::with_capacity(n);
    for i in 0..n {
        let ty = [LayerType::Conv1x1, LayerType::Conv3x3, LayerType::Conv5x5, LayerType::SkipAdd, LayerType::PixelShuffle]
            [rng.gen_range(0..5)];
        let desc = LayerDescriptor::new(ty, 4 + i, rng.gen_range(4..64), rng.gen_range(4..64), 8).unwrap();
        let dense = rng.gen_range(0.05..5.0);
        table.insert(desc, SchemeKey::Dense, 0.0, dense);
        let scheme = if ty.prunable() && rng.gen_bool(0.85) {
            Some(PruningScheme::ALL[rng.gen_range(0..3)])
        } else {
            None
        };
        if ty.prunable() {
            for s in PruningScheme::ALL {
                let best = rng.gen_range(1.0..12.0);
                let mut ms = dense;
                for &r in DEFAULT_GRID.iter().filter(|&&r| r > 0.0) {
                    if s == PruningScheme::Pattern && ty == LayerType::Conv3x3 && r < pattern_floor() {
                        continue;
                    }
                    let ideal = dense / (1.0 + (best - 1.0) * r / 0.95);
                    ms = (ideal * rng.gen_range(0.95..1.1)).min(ms);
                    table.insert(desc, SchemeKey::Sparse(s), r, ms);
                }
            }
        }
        layers.push(ModelLayer {
            desc,
            scheme,
            ratio: 0.0,
        });
    }
    let overhead = if rng.gen_bool(0.7) { rng.gen_range(0.0..0.5) } else { 0.0 };
    let dense_total = overhead + layers.iter().map(|l| table.dense(&l.desc).unwrap()).sum::<f64>();
    let target = dense_total * rng.gen_range(0.05..1.2);
    RandomModel {
        layers,
        table,
        overhead,
        target,
    }
}

/// Feasible iff `t` exceeds the fixed part and every prunable layer can
/// reach the uniform required speedup somewhere on its series.
fn feasible_oracle(m: &RandomModel) -> Option<bool> {
    let q = sparsearch::latency::quantize_ms;
    let mut fixed = q(m.overhead);
    let mut dense_total = q(m.overhead);
    for l in &m.layers {
        let d = m.table.dense(&l.desc).unwrap();
        dense_total += d;
        if l.scheme.is_none() {
            fixed += d;
        }
    }
    if m.target <= fixed {
        return Some(false);
    }
    let s = (dense_total - fixed) / (m.target - fixed);
    let mut ok = true;
    for l in &m.layers {
        if let Some(sch) = l.scheme {
            let series = m.table.series(&l.desc, sch).unwrap();
            let max = series.iter().map(|e| series[0].1 / e.1).fold(0.0, f64::max);
            if (max - s).abs() < 1e-9 * s {
                return None;
            }
            ok &= s <= 1.0 || max >= s;
        }
    }
    Some(ok)
}

#[test]
fn min_ratios_never_silently_exceed_target() {
    let _g = serial();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let (mut feasible, mut reported, mut violations, mut disagreements, mut skipped) = (0, 0, 0, 0, 0);
    for _ in 0..100 {
        let m = random_model(&mut rng);
        let oracle = feasible_oracle(&m);
        match min_pruning_ratios(&m.layers, &m.table, m.overhead, m.target) {
            Ok(plan) => {
                feasible += 1;
                let total = estimate(&plan.layers(&m.layers), &m.table, m.overhead).unwrap().total_ms;
                if total > m.target {
                    violations += 1;
                }
                for (l, r) in m.layers.iter().zip(&plan.ratios) {
                    if l.scheme.is_none() && *r != 0.0 {
                        violations += 1;
                    }
                }
                if oracle == Some(false) {
                    disagreements += 1;
                }
            }
            Err(LatencyError::InfeasibleTarget { .. }) | Err(LatencyError::Unreachable { .. }) => {
                reported += 1;
                if oracle == Some(true) {
                    disagreements += 1;
                }
            }
            Err(e) => panic!("unexpected error {e}"),
        }
        skipped += oracle.is_none() as usize;
    }
    let el = t0.elapsed();
    let pass = violations == 0 && disagreements == 0 && feasible > 0 && reported > 0 && el < Duration::from_secs(10);
    assert!(verdict(
        8,
        pass,
        format!(
            "{feasible} feasible all within target ({violations} violations), {reported} reported infeasible, {disagreements} oracle disagreements, {skipped} boundary cases, {el:.1?}"
        )
    ));
}

// ---------------------------------------------------------------- 9

fn table_fitness(seed: u64) -> impl Fn(&KernelConfig) -> f64 {
    move |c: &KernelConfig| {
        let mut r = ChaCha8Rng::seed_from_u64(
            seed ^ (c.tile_rows as u64) << 8 ^ (c.tile_cols as u64) << 16 ^ (c.tile_depth as u64) << 24
                ^ (c.unroll as u64) << 32
                ^ (c.threads as u64) << 40,
        );
        r.gen_range(1.0..2.0)
    }
}

#[test]
fn autotuner_matches_brute_force_and_beats_default() {
    let _g = serial();
    let t0 = Instant::now();
    let menu_sets = [
        Menus {
            tile_rows: vec![4, 8, 16, 32],
            tile_cols: vec![4, 16],
            tile_depth: vec![8, 16],
            unroll: vec![1, 4],
            threads: vec![1, 2],
        },
        Menus {
            tile_rows: vec![8, 16],
            tile_cols: vec![8, 16],
            tile_depth: vec![4, 8, 16, 32],
            unroll: vec![1, 2, 4, 8],
            threads: vec![1],
        },
        Menus {
            tile_rows: vec![16],
            tile_cols: vec![4, 8, 16, 32, 64],
            tile_depth: vec![16],
            unroll: vec![1, 2, 4],
            threads: vec![1, 2, 4, 8],
        },
    ];
    let (mut exact, mut runs) = (0, 0);
    for (mi, menus) in menu_sets.iter().enumerate() {
        assert!(menus.size() <= 64);
        for seed in 0..10u64 {
            let f = table_fitness(seed * 31 + mi as u64);
            let want = menus.enumerate().into_iter().min_by(|a, b| f(a).total_cmp(&f(b))).unwrap();
            let r = ga_tune(|c: &KernelConfig| Ok(f(c)), menus, &GaConfig { seed, ..GaConfig::default() }).unwrap();
            runs += 1;
            exact += (r.best == want) as usize;
        }
    }

    let shape = GemmShape {
        rows: 48,
        k: 216,
        n: 14400,
        kernel: 3,
    };
    let mut wins = 0;
    let mut ratios = Vec::new();
    for seed in 0..10u64 {
        let bench = gemm_bench(shape, Some(PruningScheme::Block), 0.9, &MaskParams::default(), 0).unwrap();
        let r = ga_tune(bench, &Menus::default(), &GaConfig { seed, ..GaConfig::default() }).unwrap();
        let mut b = gemm_bench(shape, Some(PruningScheme::Block), 0.9, &MaskParams::default(), 0).unwrap();
        let (mut tuned, mut default) = (Vec::new(), Vec::new());
        for _ in 0..21 {
            tuned.push(b(&r.best).unwrap());
            default.push(b(&KernelConfig::default()).unwrap());
        }
        let (t, d) = (median(&tuned).unwrap(), median(&default).unwrap());
        wins += (t <= d) as usize;
        ratios.push(d / t);
    }
    let el = t0.elapsed();
    let pass = exact == runs && wins >= 7 && el < Duration::from_secs(300);
    assert!(verdict(
        9,
        pass,
        format!(
            "brute-force optimum {exact}/{runs}, tuned <= default in {wins}/10 seeds (default/tuned median {:.2}), {el:.1?}",
            median(&ratios).unwrap()
        )
    ));
}

// ---------------------------------------------------------------- 10

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml")
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn run_tiny(out: &Path) -> Duration {
    let t = Instant::now();
    let st = Command::new(env!("CARGO_BIN_EXE_sparsearch"))
        .args(["pipeline", "--config"])
        .arg(tiny_config())
        .arg("--output")
        .arg(out)
        .env_remove("SPARSEARCH_THREADS")
        .status()
        .unwrap();
    assert!(st.success(), "pipeline exited with {st}");
    t.elapsed()
}

#[test]
fn tiny_pipeline_is_reproducible_and_meets_target() {
    let _g = serial();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let first = run_tiny(&out);
    let a = snapshot(&out);
    fs::remove_dir_all(&out).unwrap();
    let second = run_tiny(&out);
    let b = snapshot(&out);
    let differing: Vec<_> = a.keys().chain(b.keys()).filter(|k| a.get(*k) != b.get(*k)).collect();
    let summary: BTreeMap<String, String> = sparsearch_cli::pipeline::read_summary(&out.join("report.txt"))
        .unwrap()
        .into_iter()
        .collect();
    let final_ms: f64 = summary["final_ms"].parse().unwrap();
    let target: f64 = summary["target_ms"].parse().unwrap();
    let slowest = first.max(second);
    let pass = differing.is_empty() && !a.is_empty() && final_ms <= target && slowest < Duration::from_secs(600);
    assert!(verdict(
        10,
        pass,
        format!(
            "{} artifacts, {} differ between reruns, final {final_ms:.4} ms vs target {target} ms, runs {first:.1?} / {second:.1?}",
            a.len(),
            differing.len()
        )
    ));
}
