use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::engine::{Evaluation, Evaluator};
use super::SyntheticLandscape;
use crate::latency::{min_pruning_ratios, LatencyTable, RatioPlan};
use crate::nn::{Dataset, TrainConfig};
use crate::pruning::{one_shot_prune, short_retrain, LayerPrune};
use crate::search_space::Candidate;
use crate::sparse::MaskParams;
use crate::supernet::{PathModel, Supernet, SupernetConfig};

impl Evaluator for SyntheticLandscape {
    fn evaluate(&self, candidate: &Candidate, _seed: u64) -> Result<Evaluation, String> {
        self.space().validate(candidate).map_err(|e| e.to_string())?;
        Ok(Evaluation {
            reward: self.reward(candidate),
            latency_ms: 0.0,
        })
    }
}

/// Latency plan for a candidate under `target_ms`.
pub fn plan_candidate(
    config: &SupernetConfig,
    candidate: &Candidate,
    table: &LatencyTable,
    overhead_ms: f64,
    target_ms: f64,
) -> Result<(RatioPlan, Vec<LayerPrune>), String> {
    let layers = config.candidate_layers(candidate).map_err(|e| e.to_string())?;
    let plan = min_pruning_ratios(&layers, table, overhead_ms, target_ms).map_err(|e| e.to_string())?;
    let prunes = layers
        .iter()
        .zip(&plan.ratios)
        .filter_map(|(l, &ratio)| l.scheme.map(|scheme| LayerPrune { scheme, ratio }))
        .collect();
    Ok((plan, prunes))
}

/// Inherit the path's weights, prune to the latency target in one shot,
/// retrain briefly and score on validation data.
pub struct SupernetPruneEvaluator<'a> {
    pub supernet: &'a Supernet,
    pub table: &'a LatencyTable,
    pub overhead_ms: f64,
    pub target_ms: f64,
    pub mask: MaskParams,
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub retrain: TrainConfig,
}

impl SupernetPruneEvaluator<'_> {
    /// Pruned and retrained model with its reward and planned latency.
    pub fn evaluate_model(&self, candidate: &Candidate, seed: u64) -> Result<(PathModel, Evaluation), String> {
        let (plan, prunes) = plan_candidate(self.supernet.config(), candidate, self.table, self.overhead_ms, self.target_ms)?;
        let mut model = self.supernet.extract_path(&candidate.cells).map_err(|e| e.to_string())?;
        let out = one_shot_prune(&mut model, &prunes, &self.mask).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reward = short_retrain(&mut model, &out.masks, self.train, self.val, &self.retrain, &mut rng).map_err(|e| e.to_string())?;
        Ok((
            model,
            Evaluation {
                reward,
                latency_ms: plan.estimate.total_ms,
            },
        ))
    }
}

impl Evaluator for SupernetPruneEvaluator<'_> {
    fn evaluate(&self, candidate: &Candidate, seed: u64) -> Result<Evaluation, String> {
        self.evaluate_model(candidate, seed).map(|(_, e)| e)
    }
}
