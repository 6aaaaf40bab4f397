//! Genetic search over kernel schedules, plus a cache of tuned results.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::search_space::PruningScheme;
use crate::sparse::KernelConfig;
use crate::stats::median;

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("invalid tuner configuration: {0}")]
    Config(String),
    #[error("every configuration failed to run")]
    NoFeasible,
    #[error("cache line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Allowed values of every schedule field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Menus {
    pub tile_rows: Vec<usize>,
    pub tile_cols: Vec<usize>,
    pub tile_depth: Vec<usize>,
    pub unroll: Vec<usize>,
    pub threads: Vec<usize>,
}

impl Default for Menus {
    fn default() -> Self {
        let tiles = vec![4, 8, 16, 32, 64];
        Self {
            tile_rows: tiles.clone(),
            tile_cols: tiles.clone(),
            tile_depth: tiles,
            unroll: vec![1, 2, 4, 8],
            threads: vec![1, 2, 4, 8],
        }
    }
}

impl Menus {
    fn fields(&self) -> [&[usize]; 5] {
        [&self.tile_rows, &self.tile_cols, &self.tile_depth, &self.unroll, &self.threads]
    }

    pub fn size(&self) -> usize {
        self.fields().iter().map(|f| f.len()).product()
    }

    pub fn validate(&self) -> Result<(), TuneError> {
        if self.fields().iter().any(|f| f.is_empty() || f.contains(&0)) {
            return Err(TuneError::Config("every menu needs at least one positive value".into()));
        }
        Ok(())
    }

    pub fn contains(&self, c: &KernelConfig) -> bool {
        genes(c).iter().zip(self.fields()).all(|(g, f)| f.contains(g))
    }

    /// Every configuration, in lexicographic menu order.
    pub fn enumerate(&self) -> Vec<KernelConfig> {
        let f = self.fields();
        let mut out = Vec::with_capacity(self.size());
        for &a in f[0] {
            for &b in f[1] {
                for &c in f[2] {
                    for &d in f[3] {
                        for &e in f[4] {
                            out.push(from_genes([a, b, c, d, e]));
                        }
                    }
                }
            }
        }
        out
    }

    pub fn random<R: Rng + ?Sized>(&self, rng: &mut R) -> KernelConfig {
        let f = self.fields();
        from_genes(std::array::from_fn(|i| *f[i].choose(rng).expect("non-empty menu")))
    }
}

fn genes(c: &KernelConfig) -> [usize; 5] {
    [c.tile_rows, c.tile_cols, c.tile_depth, c.unroll, c.threads]
}

fn from_genes(g: [usize; 5]) -> KernelConfig {
    KernelConfig {
        tile_rows: g[0],
        tile_cols: g[1],
        tile_depth: g[2],
        unroll: g[3],
        threads: g[4],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    pub tournament: usize,
    /// Timings per fitness value (their median is used).
    pub reps: usize,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population: 16,
            generations: 20,
            crossover_rate: 0.8,
            mutation_rate: 0.1,
            tournament: 3,
            reps: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult {
    pub best: KernelConfig,
    pub best_ms: f64,
    /// Best fitness after each generation (index 0 is the initial population).
    pub history: Vec<f64>,
    /// Distinct configurations measured.
    pub evaluations: usize,
}

/// Memoised fitness: each configuration is measured once, as the median of
/// `reps` timings. Failures count as infinitely slow.
struct Fitness<F> {
    bench: F,
    reps: usize,
    cache: HashMap<KernelConfig, f64>,
}

impl<F: FnMut(&KernelConfig) -> Result<f64, String>> Fitness<F> {
    fn get(&mut self, c: &KernelConfig) -> f64 {
        if let Some(&v) = self.cache.get(c) {
            return v;
        }
        let mut times = Vec::with_capacity(self.reps);
        let mut failed = false;
        for _ in 0..self.reps.max(1) {
            match (self.bench)(c) {
                Ok(t) if t.is_finite() => times.push(t),
                Ok(_) => failed = true,
                Err(e) => {
                    log::warn!("kernel config {c:?} failed: {e}");
                    failed = true;
                }
            }
            if failed {
                break;
            }
        }
        let v = if failed { f64::INFINITY } else { median(&times).unwrap_or(f64::INFINITY) };
        self.cache.insert(*c, v);
        v
    }
}

fn best_of(pop: &[(KernelConfig, f64)]) -> (KernelConfig, f64) {
    // Earlier members win ties, so the seeded default keeps its place.
    pop.iter()
        .fold(None::<(KernelConfig, f64)>, |acc, &(c, f)| match acc {
            Some((_, bf)) if bf <= f => acc,
            _ => Some((c, f)),
        })
        .expect("population is non-empty")
}

/// Genetic tuning: tournament selection, single-point crossover over the
/// five schedule fields, per-field mutation and elitism.
///
/// The initial population holds the default schedule (when it is on the
/// menus) plus random members, so the result is never slower than the
/// default as measured here.
pub fn ga_tune<F>(bench: F, menus: &Menus, cfg: &GaConfig) -> Result<TuneResult, TuneError>
where
    F: FnMut(&KernelConfig) -> Result<f64, String>,
{
    menus.validate()?;
    if cfg.population < 4 {
        return Err(TuneError::Config(format!("population must be at least 4, got {}", cfg.population)));
    }
    if !(0.0..=1.0).contains(&cfg.crossover_rate) || !(0.0..=1.0).contains(&cfg.mutation_rate) {
        return Err(TuneError::Config("rates must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut fit = Fitness {
        bench,
        reps: cfg.reps,
        cache: HashMap::new(),
    };
    let mut members = Vec::with_capacity(cfg.population);
    let default = KernelConfig::default();
    if menus.contains(&default) {
        members.push(default);
    }
    while members.len() < cfg.population {
        members.push(menus.random(&mut rng));
    }
    let mut pop: Vec<(KernelConfig, f64)> = members.iter().map(|c| (*c, fit.get(c))).collect();
    let mut elite = best_of(&pop);
    let mut history = vec![elite.1];
    let fields = menus.fields();
    for _ in 0..cfg.generations {
        let tournament = |rng: &mut ChaCha8Rng, pop: &[(KernelConfig, f64)]| {
            let mut pick = pop[rng.gen_range(0..pop.len())];
            for _ in 1..cfg.tournament.max(1) {
                let other = pop[rng.gen_range(0..pop.len())];
                if other.1 < pick.1 {
                    pick = other;
                }
            }
            pick.0
        };
        let mut next = vec![elite.0];
        while next.len() < cfg.population {
            let (a, b) = (genes(&tournament(&mut rng, &pop)), genes(&tournament(&mut rng, &pop)));
            let mut child = a;
            if rng.gen_bool(cfg.crossover_rate) {
                let cut = rng.gen_range(1..5);
                child[cut..].copy_from_slice(&b[cut..]);
            }
            for (g, menu) in child.iter_mut().zip(fields) {
                if rng.gen_bool(cfg.mutation_rate) {
                    *g = *menu.choose(&mut rng).expect("non-empty menu");
                }
            }
            let child = novel(child, |c| fit.cache.contains_key(c) || next.contains(c), menus, &mut rng);
            next.push(child);
        }
        pop = next.iter().map(|c| (*c, fit.get(c))).collect();
        let gen_best = best_of(&pop);
        if gen_best.1 < elite.1 {
            elite = gen_best;
        }
        history.push(elite.1);
    }
    if !elite.1.is_finite() {
        return Err(TuneError::NoFeasible);
    }
    Ok(TuneResult {
        best: elite.0,
        best_ms: elite.1,
        history,
        evaluations: fit.cache.len(),
    })
}

/// Menus up to this size may be enumerated to find an unexplored config.
const ENUMERABLE: usize = 4096;

/// Steers a child away from configurations already measured: a few random
/// single-gene mutations, then an unexplored immigrant on small menus.
fn novel(
    mut child: [usize; 5],
    seen: impl Fn(&KernelConfig) -> bool,
    menus: &Menus,
    rng: &mut ChaCha8Rng,
) -> KernelConfig {
    let fields = menus.fields();
    for _ in 0..16 {
        if !seen(&from_genes(child)) {
            return from_genes(child);
        }
        let f = rng.gen_range(0..5);
        child[f] = *fields[f].choose(rng).expect("non-empty menu");
    }
    if menus.size() <= ENUMERABLE {
        let fresh: Vec<KernelConfig> = menus.enumerate().into_iter().filter(|c| !seen(c)).collect();
        if let Some(c) = fresh.choose(rng) {
            return *c;
        }
    }
    from_genes(child)
}

/// Uniform sampling of `budget` distinct configurations.
pub fn random_tune<F>(bench: F, menus: &Menus, budget: usize, reps: usize, seed: u64) -> Result<TuneResult, TuneError>
where
    F: FnMut(&KernelConfig) -> Result<f64, String>,
{
    menus.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all = menus.enumerate();
    all.shuffle(&mut rng);
    let mut fit = Fitness {
        bench,
        reps,
        cache: HashMap::new(),
    };
    let pop: Vec<(KernelConfig, f64)> = all.iter().take(budget.max(1)).map(|c| (*c, fit.get(c))).collect();
    let best = best_of(&pop);
    if !best.1.is_finite() {
        return Err(TuneError::NoFeasible);
    }
    Ok(TuneResult {
        best: best.0,
        best_ms: best.1,
        history: vec![best.1],
        evaluations: pop.len(),
    })
}

/// Operands for timing one GEMM under different schedules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GemmShape {
    pub rows: usize,
    pub k: usize,
    pub n: usize,
    /// Square kernel side when the GEMM comes from a convolution (1 otherwise).
    pub kernel: usize,
}

/// Wall-clock timer of the GEMM `rows × k` by `k × n` under a schedule.
///
/// Weights are random and masked with `scheme` at `ratio` (dense when
/// `scheme` is `None`). Operands are built once; every call does one warm-up
/// and one timed run and returns milliseconds.
pub fn gemm_bench(
    shape: GemmShape,
    scheme: Option<PruningScheme>,
    ratio: f64,
    mask: &crate::sparse::MaskParams,
    seed: u64,
) -> Result<impl FnMut(&KernelConfig) -> Result<f64, String>, TuneError> {
    use crate::sparse::{dense_gemm_into, make_mask, spmm_into, BcsMatrix};
    let GemmShape { rows, k, n, kernel } = shape;
    if rows == 0 || k == 0 || n == 0 || kernel == 0 || k % (kernel * kernel) != 0 {
        return Err(TuneError::Config(format!("bad GEMM shape {rows}x{k}x{n} for kernel {kernel}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..rows * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let sparse = match scheme {
        Some(s) if ratio > 0.0 => {
            let m = make_mask(&w, rows, k, (kernel, kernel), s, ratio, mask).map_err(|e| TuneError::Config(e.to_string()))?;
            let masked: Vec<f32> = m.apply(&w).iter().map(|&v| v as f32).collect();
            Some(BcsMatrix::encode(&masked, &m).map_err(|e| TuneError::Config(e.to_string()))?)
        }
        _ => None,
    };
    let wf: Vec<f32> = w.iter().map(|&v| v as f32).collect();
    let mut out = vec![0.0f32; rows * n];
    Ok(move |cfg: &KernelConfig| {
        let once = |out: &mut [f32]| match &sparse {
            Some(m) => spmm_into(m, &x, n, cfg, out).map_err(|e| e.to_string()),
            None => dense_gemm_into(&wf, rows, k, &x, n, cfg, out).map_err(|e| e.to_string()),
        };
        once(&mut out)?;
        let t = std::time::Instant::now();
        once(&mut out)?;
        std::hint::black_box(&out);
        Ok(t.elapsed().as_secs_f64() * 1e3)
    })
}

/// Cache key: GEMM shape `rows x k x n`, scheme and ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TuneKey {
    pub rows: usize,
    pub k: usize,
    pub n: usize,
    pub scheme: Option<PruningScheme>,
    /// Ratio in millionths, so keys compare exactly.
    pub ratio_ppm: u32,
}

impl TuneKey {
    pub fn new(rows: usize, k: usize, n: usize, scheme: Option<PruningScheme>, ratio: f64) -> Self {
        Self {
            rows,
            k,
            n,
            scheme,
            ratio_ppm: (ratio * 1e6).round() as u32,
        }
    }

    pub fn ratio(&self) -> f64 {
        self.ratio_ppm as f64 / 1e6
    }
}

/// Tuned configurations, one line each:
/// `shape,scheme,ratio,tile_r,tile_c,tile_d,unroll,threads,ms`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TuneCache {
    entries: BTreeMap<TuneKey, (KernelConfig, f64)>,
}

impl TuneCache {
    pub fn insert(&mut self, key: TuneKey, cfg: KernelConfig, ms: f64) {
        self.entries.insert(key, (cfg, ms));
    }

    pub fn get(&self, key: &TuneKey) -> Option<(KernelConfig, f64)> {
        self.entries.get(key).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write<W: Write>(&self, mut out: W, header: &[String]) -> Result<(), TuneError> {
        for h in header {
            writeln!(out, "# {h}")?;
        }
        for (k, (c, ms)) in &self.entries {
            writeln!(
                out,
                "{}x{}x{},{},{},{},{},{},{},{},{}",
                k.rows,
                k.k,
                k.n,
                k.scheme.map_or("dense", |s| s.name()),
                k.ratio(),
                c.tile_rows,
                c.tile_cols,
                c.tile_depth,
                c.unroll,
                c.threads,
                ms
            )?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self, TuneError> {
        let mut cache = Self::default();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: String| TuneError::Parse { line: i + 1, reason };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(err(format!("expected 9 fields, found {}", f.len())));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|e| err(format!("{s:?}: {e}")));
            let dims: Vec<usize> = f[0].split('x').map(num).collect::<Result<_, _>>()?;
            if dims.len() != 3 {
                return Err(err(format!("shape {:?} is not RxKxN", f[0])));
            }
            let scheme = match f[1] {
                "dense" => None,
                s => Some(s.parse::<PruningScheme>().map_err(|e| err(e.to_string()))?),
            };
            let ratio: f64 = f[2].parse().map_err(|e| err(format!("ratio: {e}")))?;
            let cfg = from_genes([num(f[3])?, num(f[4])?, num(f[5])?, num(f[6])?, num(f[7])?]);
            let ms: f64 = f[8].parse().map_err(|e| err(format!("ms: {e}")))?;
            cache.insert(TuneKey::new(dims[0], dims[1], dims[2], scheme, ratio), cfg, ms);
        }
        Ok(cache)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_menus() -> Menus {
        Menus {
            tile_rows: vec![4, 8, 16, 32],
            tile_cols: vec![4, 16],
            tile_depth: vec![8, 16],
            unroll: vec![1, 4],
            threads: vec![1, 2],
        }
    }

    fn convex(c: &KernelConfig) -> f64 {
        let l = |v: usize, best: f64| ((v as f64).log2() - best).powi(2);
        1.0 + l(c.tile_rows, 3.0) + 0.5 * l(c.tile_cols, 4.0) + 0.3 * l(c.tile_depth, 3.0) + 0.2 * l(c.unroll, 2.0)
            + 0.1 * l(c.threads, 1.0)
    }

    #[test]
    fn single_entry_menus_measure_once() {
        let menus = Menus {
            tile_rows: vec![8],
            tile_cols: vec![8],
            tile_depth: vec![8],
            unroll: vec![2],
            threads: vec![1],
        };
        let mut calls = 0;
        let r = ga_tune(
            |_: &KernelConfig| {
                calls += 1;
                Ok(1.0)
            },
            &menus,
            &GaConfig { reps: 1, ..Default::default() },
        )
        .unwrap();
        assert_eq!(r.best, from_genes([8, 8, 8, 2, 1]));
        assert_eq!(calls, 1);
        assert_eq!(r.evaluations, 1);
    }

    #[test]
    fn finds_brute_force_optimum_on_small_menus() {
        let menus = small_menus();
        assert!(menus.size() <= 64);
        let want = menus
            .enumerate()
            .into_iter()
            .min_by(|a, b| convex(a).total_cmp(&convex(b)))
            .unwrap();
        for seed in 0..10 {
            let r = ga_tune(|c: &KernelConfig| Ok(convex(c)), &menus, &GaConfig { seed, ..Default::default() }).unwrap();
            assert_eq!(r.best, want, "seed {seed}");
            assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn failing_configs_are_worst() {
        let menus = small_menus();
        let r = ga_tune(
            |c: &KernelConfig| if c.threads == 2 { Err("no".into()) } else { Ok(convex(c)) },
            &menus,
            &GaConfig::default(),
        )
        .unwrap();
        assert_eq!(r.best.threads, 1);
        assert!(matches!(
            ga_tune(|_: &KernelConfig| Err("no".into()), &menus, &GaConfig::default()),
            Err(TuneError::NoFeasible)
        ));
    }

    #[test]
    fn rejects_tiny_population() {
        let r = ga_tune(|_: &KernelConfig| Ok(1.0), &Menus::default(), &GaConfig { population: 3, ..Default::default() });
        assert!(r.is_err());
    }

    #[test]
    fn random_baseline_respects_budget() {
        let r = random_tune(|c: &KernelConfig| Ok(convex(c)), &small_menus(), 10, 1, 3).unwrap();
        assert_eq!(r.evaluations, 10);
    }

    #[test]
    fn gemm_bench_times_every_schedule() {
        let shape = GemmShape { rows: 8, k: 18, n: 40, kernel: 3 };
        let mut bench = gemm_bench(shape, Some(PruningScheme::Block), 0.5, &Default::default(), 1).unwrap();
        for c in small_menus().enumerate().iter().take(8) {
            let ms = bench(c).unwrap();
            assert!(ms.is_finite() && ms >= 0.0);
        }
        assert!(gemm_bench(GemmShape { k: 10, ..shape }, None, 0.0, &Default::default(), 1).is_err());
    }

    #[test]
    fn cache_round_trip() {
        let mut c = TuneCache::default();
        c.insert(TuneKey::new(48, 216, 57600, Some(PruningScheme::Block), 0.9), from_genes([16, 16, 16, 1, 1]), 8.5);
        c.insert(TuneKey::new(48, 216, 57600, None, 0.0), from_genes([4, 64, 64, 8, 1]), 72.0);
        let mut buf = Vec::new();
        c.write(&mut buf, &[]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("48x216x57600,block,0.9,16,16,16,1,1,8.5\n"));
        assert_eq!(TuneCache::read(buf.as_slice()).unwrap(), c);
    }
}
