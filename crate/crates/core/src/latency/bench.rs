//! Table construction from a per-entry benchmark.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LatencyError, LatencyTable, LayerDescriptor, LayerType, Provenance, SchemeKey};
use crate::search_space::PruningScheme;
use crate::sparse::{dense_gemm_into, make_mask, pattern_floor, spmm_into, BcsMatrix, KernelConfig, MaskParams};
use crate::stats::median;

/// Runs `bench` `reps` times per entry and records the median.
///
/// Entries are measured one at a time. Pattern entries below the pattern
/// floor are skipped for 3×3 layers, which cannot realise them. Series are
/// clamped to be non-increasing afterwards.
pub fn build_table<F>(
    mut bench: F,
    descriptors: &[LayerDescriptor],
    grid: &[f64],
    reps: usize,
    device: &str,
    provenance: Provenance,
) -> Result<LatencyTable, LatencyError>
where
    F: FnMut(&LayerDescriptor, SchemeKey, f64) -> Result<f64, String>,
{
    let mut table = LatencyTable::new(device, provenance, grid.to_vec())?;
    let mut measure = |d: &LayerDescriptor, s: SchemeKey, r: f64| -> Result<f64, LatencyError> {
        let samples = (0..reps.max(1))
            .map(|_| bench(d, s, r))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|reason| LatencyError::Bench {
                desc: *d,
                scheme: s,
                ratio: r,
                reason,
            })?;
        let m = median(&samples).expect("at least one sample");
        if !m.is_finite() || m < 0.0 {
            return Err(LatencyError::Bench {
                desc: *d,
                scheme: s,
                ratio: r,
                reason: format!("invalid latency {m}"),
            });
        }
        Ok(m)
    };
    for d in descriptors {
        let dense = measure(d, SchemeKey::Dense, 0.0)?;
        table.insert(*d, SchemeKey::Dense, 0.0, dense);
        if !d.layer_type.prunable() {
            continue;
        }
        for scheme in PruningScheme::ALL {
            for &r in grid.iter().filter(|&&r| r > 0.0) {
                if scheme == PruningScheme::Pattern
                    && d.layer_type == LayerType::Conv3x3
                    && r < pattern_floor() - 1e-12
                {
                    continue;
                }
                let key = SchemeKey::Sparse(scheme);
                let ms = measure(d, key, r)?;
                table.insert(*d, key, r, ms);
            }
        }
    }
    let clamped = table.enforce_monotone();
    if clamped > 0 {
        log::warn!("{clamped} latency entries clamped to keep series non-increasing");
    }
    Ok(table)
}

/// Deterministic cost model: a fixed launch cost plus a per-MAC cost scaled
/// by the kept fraction and a per-scheme irregularity factor.
pub fn synthetic_bench(desc: &LayerDescriptor, scheme: SchemeKey, ratio: f64) -> Result<f64, String> {
    const LAUNCH_MS: f64 = 0.01;
    const MS_PER_MAC: f64 = 2e-6;
    const MS_PER_ELEM: f64 = 2e-7;
    let ms = match desc.layer_type {
        LayerType::SkipAdd => LAUNCH_MS + MS_PER_ELEM * desc.macs() as f64,
        LayerType::PixelShuffle => LAUNCH_MS + 2.0 * MS_PER_ELEM * desc.macs() as f64,
        _ => {
            let factor = match scheme {
                SchemeKey::Dense => 1.0,
                SchemeKey::Sparse(PruningScheme::Channel) => 1.0,
                SchemeKey::Sparse(PruningScheme::Block) => 1.1,
                SchemeKey::Sparse(PruningScheme::Pattern) => 1.2,
            };
            let kept = if scheme == SchemeKey::Dense { 1.0 } else { 1.0 - ratio };
            LAUNCH_MS + MS_PER_MAC * desc.macs() as f64 * (kept * factor).min(1.0)
        }
    };
    Ok(ms)
}

/// Options for [`host_bench`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchSpec {
    pub seed: u64,
    pub kernel: KernelConfig,
    pub mask: crate::sparse::BlockDims,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            kernel: KernelConfig::default(),
            mask: crate::sparse::BlockDims::default(),
        }
    }
}

enum Prepared {
    Dense { w: Vec<f32>, rows: usize, k: usize },
    Sparse(BcsMatrix<f32>),
    Add { a: Vec<f32>, b: Vec<f32> },
    Shuffle { x: Vec<f64>, c: usize, h: usize, w: usize, r: usize },
}

struct HostState {
    key: Option<(LayerDescriptor, SchemeKey, u64)>,
    prepared: Option<Prepared>,
    rhs: Vec<f32>,
    rhs_key: Option<(usize, usize)>,
    out: Vec<f32>,
}

/// Wall-clock benchmark of this crate's kernels on the host CPU.
///
/// Convolutions are timed in their GEMM view (`out × in·k²` weights against
/// an `in·k² × H·W` operand, f32). Operands for an entry are generated once
/// and reused across repetitions.
pub fn host_bench(spec: BenchSpec) -> impl FnMut(&LayerDescriptor, SchemeKey, f64) -> Result<f64, String> {
    let mut st = HostState {
        key: None,
        prepared: None,
        rhs: Vec::new(),
        rhs_key: None,
        out: Vec::new(),
    };
    move |desc: &LayerDescriptor, scheme: SchemeKey, ratio: f64| {
        let key = (*desc, scheme, ratio.to_bits());
        if st.key != Some(key) {
            st.prepared = Some(prepare(desc, scheme, ratio, &spec, &mut st)?);
            st.key = Some(key);
            run(&mut st, desc, &spec)?; // warm-up
        }
        run(&mut st, desc, &spec)
    }
}

fn prepare(
    desc: &LayerDescriptor,
    scheme: SchemeKey,
    ratio: f64,
    spec: &BenchSpec,
    st: &mut HostState,
) -> Result<Prepared, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (desc.in_ch as u64) << 32 ^ desc.out_ch as u64);
    let n = desc.h * desc.w;
    match desc.layer_type.kernel() {
        Some(kernel) => {
            let (rows, k) = (desc.out_ch, desc.in_ch * kernel * kernel);
            if st.rhs_key != Some((k, n)) {
                st.rhs = (0..k * n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
                st.rhs_key = Some((k, n));
            }
            st.out = vec![0.0; rows * n];
            let w: Vec<f64> = (0..rows * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Ok(match scheme {
                SchemeKey::Sparse(s) if ratio > 0.0 => {
                    let params = MaskParams {
                        block: spec.mask,
                        ..Default::default()
                    };
                    let mask = make_mask(&w, rows, k, (kernel, kernel), s, ratio, &params).map_err(|e| e.to_string())?;
                    let masked: Vec<f32> = mask.apply(&w).iter().map(|&v| v as f32).collect();
                    Prepared::Sparse(BcsMatrix::encode(&masked, &mask).map_err(|e| e.to_string())?)
                }
                _ => Prepared::Dense {
                    w: w.iter().map(|&v| v as f32).collect(),
                    rows,
                    k,
                },
            })
        }
        None => match desc.layer_type {
            LayerType::SkipAdd => {
                let len = desc.out_ch * n;
                st.out = vec![0.0; len];
                Ok(Prepared::Add {
                    a: (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
                    b: (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
                })
            }
            _ => {
                let r = ((desc.in_ch / desc.out_ch) as f64).sqrt().round() as usize;
                if r == 0 || r * r * desc.out_ch != desc.in_ch {
                    return Err(format!("pixel shuffle {desc} has no integer factor"));
                }
                Ok(Prepared::Shuffle {
                    x: (0..desc.in_ch * n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    c: desc.in_ch,
                    h: desc.h,
                    w: desc.w,
                    r,
                })
            }
        },
    }
}

fn run(st: &mut HostState, desc: &LayerDescriptor, spec: &BenchSpec) -> Result<f64, String> {
    let n = desc.h * desc.w;
    let start = Instant::now();
    match st.prepared.as_ref().expect("prepared") {
        Prepared::Dense { w, rows, k } => {
            dense_gemm_into(w, *rows, *k, &st.rhs, n, &spec.kernel, &mut st.out).map_err(|e| e.to_string())?
        }
        Prepared::Sparse(m) => spmm_into(m, &st.rhs, n, &spec.kernel, &mut st.out).map_err(|e| e.to_string())?,
        Prepared::Add { a, b } => {
            for ((o, x), y) in st.out.iter_mut().zip(a).zip(b) {
                *o = x + y;
            }
        }
        Prepared::Shuffle { x, c, h, w, r } => {
            let y = crate::tensor::kernels::pixel_shuffle(x, 1, *c, *h, *w, *r);
            std::hint::black_box(&y);
        }
    }
    std::hint::black_box(&st.out);
    Ok(start.elapsed().as_secs_f64() * 1e3)
}
