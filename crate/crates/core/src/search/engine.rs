use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ObservationStore, SearchError};
use crate::predictor::{ucb, PredictorConfig, PredictorEnsemble};
use crate::search_space::{Candidate, SearchSpace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Elites mutated to build the pool.
    pub h: usize,
    /// Pool size.
    pub c: usize,
    /// Candidates evaluated per step.
    pub b: usize,
    /// Ensemble size.
    pub p: usize,
    pub beta: f64,
    pub steps: usize,
    pub warm_start: usize,
    pub seed: u64,
    /// Concurrent evaluation jobs.
    pub jobs: usize,
    pub predictor: PredictorConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            h: 10,
            c: 100,
            b: 8,
            p: 20,
            beta: 0.5,
            steps: 10,
            warm_start: 20,
            seed: 0,
            jobs: 1,
            predictor: PredictorConfig::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        if self.b == 0 || self.b >= self.c {
            return Err(SearchError::Config(format!("need 0 < B < C, got B={} C={}", self.b, self.c)));
        }
        if self.h == 0 || self.p < 2 || self.jobs == 0 {
            return Err(SearchError::Config("H and jobs must be positive and P at least 2".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(SearchError::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Score of one evaluated candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub reward: f64,
    pub latency_ms: f64,
}

/// Anything that can score a candidate. `seed` is fixed per candidate so
/// results do not depend on batch composition or thread timing.
pub trait Evaluator: Sync {
    fn evaluate(&self, candidate: &Candidate, seed: u64) -> Result<Evaluation, String>;
}

impl<F> Evaluator for F
where
    F: Fn(&Candidate, u64) -> Result<Evaluation, String> + Sync,
{
    fn evaluate(&self, candidate: &Candidate, seed: u64) -> Result<Evaluation, String> {
        self(candidate, seed)
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RNG for one search step.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

/// Per-candidate evaluation seed.
pub fn candidate_seed(seed: u64, bits: &[u8]) -> u64 {
    bits.iter().fold(mix(seed), |h, &b| mix(h ^ b as u64))
}

/// `C` distinct, never-evaluated proposals.
///
/// The top-`H` records are mutated round-robin; when that stops producing
/// novel candidates the pool is topped up with random samples, and finally
/// from the enumerated remainder of a small space. An empty store gives a
/// purely random pool.
pub fn generate_pool(
    store: &ObservationStore,
    space: &SearchSpace,
    h: usize,
    c: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Candidate>, SearchError> {
    let remaining = space.size().saturating_sub(store.len() as u128);
    if remaining == 0 {
        return Err(SearchError::Exhausted);
    }
    let target = (c as u128).min(remaining) as usize;
    let mut pool = Vec::with_capacity(target);
    let mut taken: HashSet<Vec<u8>> = HashSet::new();
    let mut offer = |cand: Candidate, pool: &mut Vec<Candidate>| -> Result<(), SearchError> {
        let bits = space.encode(&cand)?;
        if !store.contains(&bits) && taken.insert(bits) {
            pool.push(cand);
        }
        Ok(())
    };
    let elites: Vec<Candidate> = store
        .ranked()
        .into_iter()
        .filter(|r| r.reward.is_finite())
        .take(h)
        .map(|r| space.decode(&r.bits))
        .collect::<Result<_, _>>()?;
    let budget = 20 * target.max(1);
    if !elites.is_empty() {
        let mut i = 0;
        while pool.len() < target && i < budget {
            let m = space.mutate(&elites[i % elites.len()], rng);
            offer(m, &mut pool)?;
            i += 1;
        }
    }
    let mut i = 0;
    while pool.len() < target && i < budget {
        offer(space.random(rng), &mut pool)?;
        i += 1;
    }
    if pool.len() < target {
        let mut rest: Vec<Candidate> = space.enumerate()?.collect();
        rest.shuffle(rng);
        for cand in rest {
            if pool.len() == target {
                break;
            }
            offer(cand, &mut pool)?;
        }
    }
    Ok(pool)
}

/// Indices of the `b` largest scores; ties go to the earlier position.
pub fn select_candidates(scores: &[f64], b: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&x, &y| scores[y].total_cmp(&scores[x]).then(x.cmp(&y)));
    idx.truncate(b);
    idx
}

/// UCB scores of a pool under an ensemble trained on the store's finite
/// records. Returns `None` when there is nothing to train on.
pub fn score_pool(
    store: &ObservationStore,
    space: &SearchSpace,
    pool: &[Candidate],
    cfg: &SearchConfig,
    seed: u64,
) -> Result<Option<Vec<f64>>, SearchError> {
    let mut feats = Vec::new();
    let mut rewards = Vec::new();
    for r in store.records().iter().filter(|r| r.reward.is_finite()) {
        feats.push(space.features(&space.decode(&r.bits)?));
        rewards.push(r.reward);
    }
    if feats.is_empty() {
        return Ok(None);
    }
    let ens = PredictorEnsemble::train(&feats, &rewards, cfg.p, &cfg.predictor, seed)?;
    let pf: Vec<Vec<f64>> = pool.iter().map(|c| space.features(c)).collect();
    Ok(Some(ens.stats(&pf)?.into_iter().map(|s| ucb(s, cfg.beta)).collect()))
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub best: Option<super::Record>,
    /// Best finite reward after each completed step (index 0 is warm start).
    pub best_so_far: Vec<f64>,
    pub steps_run: usize,
    pub exhausted: bool,
}

fn evaluate_all<E: Evaluator + ?Sized>(
    space: &SearchSpace,
    evaluator: &E,
    cands: &[Candidate],
    seed: u64,
) -> Result<Vec<(Vec<u8>, f64, f64)>, SearchError> {
    let bits: Vec<Vec<u8>> = cands.iter().map(|c| space.encode(c)).collect::<Result<_, _>>()?;
    let results = crate::par_map(cands.len(), |i| evaluator.evaluate(&cands[i], candidate_seed(seed, &bits[i])));
    Ok(bits
        .into_iter()
        .zip(cands.iter().zip(results))
        .map(|(b, (c, r))| match r {
            Ok(e) => (b, e.reward, e.latency_ms),
            Err(msg) => {
                log::warn!("evaluation of {c} failed: {msg}");
                (b, f64::NEG_INFINITY, f64::NAN)
            }
        })
        .collect())
}

fn best_trace(store: &ObservationStore, upto: usize) -> Vec<f64> {
    let mut out = vec![f64::NEG_INFINITY; upto + 1];
    for r in store.records() {
        if r.reward.is_finite() && r.step <= upto {
            out[r.step] = out[r.step].max(r.reward);
        }
    }
    for i in 1..out.len() {
        out[i] = out[i].max(out[i - 1]);
    }
    out
}

/// The evaluate-with-Bayesian-optimisation loop.
///
/// Step 0 evaluates `warm_start` random candidates. Every later step builds
/// a pool, trains a fresh ensemble on the store, evaluates the `B` pool
/// members with the highest UCB in parallel and appends them. `on_step` runs
/// after each step, typically to persist the store. A store that already
/// holds steps is resumed after its last one.
pub fn run_search<E: Evaluator + ?Sized>(
    cfg: &SearchConfig,
    space: &SearchSpace,
    evaluator: &E,
    store: &mut ObservationStore,
    mut on_step: impl FnMut(usize, &ObservationStore) -> Result<(), SearchError>,
) -> Result<SearchOutcome, SearchError> {
    cfg.validate()?;
    let threads = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| SearchError::Config(e.to_string()))?;
    let start = store.last_step().map_or(0, |s| s + 1);
    let mut exhausted = false;
    let mut steps_run = 0;
    for step in start..=cfg.steps {
        let mut rng = step_rng(cfg.seed, step);
        let want = if step == 0 { cfg.warm_start } else { cfg.c };
        let proposals = match generate_pool(store, space, cfg.h, want, &mut rng) {
            Ok(p) => p,
            Err(SearchError::Exhausted) => {
                exhausted = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let chosen: Vec<Candidate> = if step == 0 || proposals.len() <= cfg.b {
            proposals
        } else {
            let seed = candidate_seed(cfg.seed, &(step as u64).to_le_bytes());
            match threads.install(|| score_pool(store, space, &proposals, cfg, seed))? {
                Some(scores) => select_candidates(&scores, cfg.b)
                    .into_iter()
                    .map(|i| proposals[i].clone())
                    .collect(),
                None => proposals.into_iter().take(cfg.b).collect(),
            }
        };
        for (bits, reward, latency) in threads.install(|| evaluate_all(space, evaluator, &chosen, cfg.seed))? {
            store.push(bits, reward, latency, step)?;
        }
        steps_run += 1;
        on_step(step, store)?;
        log::info!("step {step}: {} records, best {:?}", store.len(), store.best().map(|r| r.reward));
    }
    let last = store.last_step().unwrap_or(0);
    Ok(SearchOutcome {
        best: store.best().cloned(),
        best_so_far: best_trace(store, last),
        steps_run,
        exhausted,
    })
}

/// Uniform random search with the same evaluation budget.
pub fn random_search<E: Evaluator + ?Sized>(
    space: &SearchSpace,
    evaluator: &E,
    budget: usize,
    seed: u64,
) -> Result<ObservationStore, SearchError> {
    let mut rng = step_rng(seed, usize::MAX);
    let cands = generate_pool(&ObservationStore::new(), space, 1, budget, &mut rng)?;
    let mut store = ObservationStore::new();
    for (bits, reward, latency) in evaluate_all(space, evaluator, &cands, seed)? {
        store.push(bits, reward, latency, 0)?;
    }
    Ok(store)
}
