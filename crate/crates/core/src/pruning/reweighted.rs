use rand::Rng;
use serde::{Deserialize, Serialize};

use super::groups::{group_partition, penalty_coefficients, surrogate_objective, update_alpha, PenaltyForm, PenaltyState};
use super::PruneError;
use crate::nn::{train, Dataset, MaskSet, Model, Penalty, TrainConfig};
use crate::search_space::PruningScheme;
use crate::sparse::BlockDims;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReweightConfig {
    pub lambda: f64,
    pub eps: f64,
    /// Groups with squared norm below this are zeroed at the end.
    pub tau: f64,
    pub outer_iters: usize,
    pub epochs_per_iter: usize,
    /// Mask-preserving epochs after thresholding.
    pub finetune_epochs: usize,
    /// Batch size and optimizer; `epochs` is ignored.
    pub train: TrainConfig,
    pub form: PenaltyForm,
    pub block: BlockDims,
}

impl Default for ReweightConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            eps: 1e-3,
            tau: 1e-6,
            outer_iters: 4,
            epochs_per_iter: 10,
            finetune_epochs: 0,
            train: TrainConfig::default(),
            form: PenaltyForm::Linear,
            block: BlockDims::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReweightResult {
    /// Fraction of zeroed weights per prunable layer.
    pub ratios: Vec<f64>,
    pub zeroed_groups: Vec<Vec<usize>>,
    pub masks: MaskSet,
    pub state: PenaltyState,
    /// Surrogate objective immediately before and after each α update.
    pub surrogate_trace: Vec<(f64, f64)>,
    pub losses: Vec<f64>,
}

/// Reweighted group-Lasso training that lets each layer find its own ratio.
///
/// α starts at 1 for every group. Each outer iteration trains
/// `epochs_per_iter` epochs on `MSE + λ Σ α_g ‖W_g‖²` and then resets
/// `α_g = 1/(‖W_g‖² + ε)` with the weights held fixed.
pub fn reweighted_determine_ratios<M: Model + ?Sized, R: Rng + ?Sized>(
    model: &mut M,
    data: &Dataset,
    schemes: &[PruningScheme],
    cfg: &ReweightConfig,
    rng: &mut R,
) -> Result<ReweightResult, PruneError> {
    let layers = model.prunable_layers();
    if layers.len() != schemes.len() {
        return Err(PruneError::Dimension(format!(
            "{} schemes for {} prunable layers",
            schemes.len(),
            layers.len()
        )));
    }
    if cfg.lambda < 0.0 || cfg.tau < 0.0 {
        return Err(PruneError::Config("lambda and tau must be non-negative".into()));
    }
    let mut state = PenaltyState::default();
    for (info, &s) in layers.iter().zip(schemes) {
        let g = group_partition(info.rows(), info.cols(), info.kernel_area(), s, cfg.block)?;
        state.alpha.push(vec![1.0; g.len()]);
        state.groups.push(g);
    }
    let train_cfg = TrainConfig {
        epochs: cfg.epochs_per_iter,
        ..cfg.train
    };
    let mut trace = Vec::with_capacity(cfg.outer_iters);
    let mut losses = Vec::new();
    for iteration in 0..cfg.outer_iters {
        let mut penalty = Penalty::default();
        for (l, info) in layers.iter().enumerate() {
            let n = model.params()[info.param].len();
            let c = penalty_coefficients(n, &state.alpha[l], &state.groups[l], cfg.lambda, cfg.form)?;
            penalty.terms.push((info.param, c));
        }
        let h = train(model, data, &train_cfg, None, Some(&penalty), rng)
            .map_err(|source| PruneError::Diverged { iteration, source })?;
        losses.extend(h);
        let (mut before, mut after) = (0.0, 0.0);
        for (l, info) in layers.iter().enumerate() {
            let w = model.params()[info.param].data();
            let next = update_alpha(w, &state.groups[l], cfg.eps)?;
            before += surrogate_objective(w, &state.alpha[l], &state.groups[l], cfg.eps)?;
            after += surrogate_objective(w, &next, &state.groups[l], cfg.eps)?;
            state.alpha[l] = next;
        }
        trace.push((before, after));
    }

    let mut masks = MaskSet::new(model.params().len());
    let mut ratios = Vec::with_capacity(layers.len());
    let mut zeroed_groups = Vec::with_capacity(layers.len());
    for (l, info) in layers.iter().enumerate() {
        let w = model.params_mut()[info.param].data_mut();
        let mut keep = vec![1.0; w.len()];
        let mut zeroed = Vec::new();
        for (gi, g) in state.groups[l].iter().enumerate() {
            let norm: f64 = g.iter().map(|&i| w[i] * w[i]).sum();
            if norm < cfg.tau {
                zeroed.push(gi);
                for &i in g {
                    w[i] = 0.0;
                    keep[i] = 0.0;
                }
            }
        }
        ratios.push(keep.iter().filter(|k| **k == 0.0).count() as f64 / keep.len().max(1) as f64);
        masks.set(info.param, keep);
        zeroed_groups.push(zeroed);
    }
    if cfg.finetune_epochs > 0 {
        let ft = TrainConfig {
            epochs: cfg.finetune_epochs,
            ..cfg.train
        };
        let h = train(model, data, &ft, Some(&masks), None, rng).map_err(|source| PruneError::Diverged {
            iteration: cfg.outer_iters,
            source,
        })?;
        losses.extend(h);
    }
    Ok(ReweightResult {
        ratios,
        zeroed_groups,
        masks,
        state,
        surrogate_trace: trace,
        losses,
    })
}
