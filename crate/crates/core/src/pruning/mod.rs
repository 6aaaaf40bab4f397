//! One-shot magnitude pruning with short retraining, and the reweighted
//! group-Lasso loop that settles per-layer pruning ratios by itself.

mod groups;
mod oneshot;
mod reweighted;

pub use groups::{
    group_partition, penalty_coefficients, regularizer, surrogate_objective, update_alpha, PenaltyForm,
    PenaltyState,
};
pub use oneshot::{format_prune_report, one_shot_prune, short_retrain, LayerPrune, PruneOutcome, PruneReportRow};
pub use reweighted::{reweighted_determine_ratios, ReweightConfig, ReweightResult};

use thiserror::Error;

use crate::nn::NnError;
use crate::sparse::SparseError;

#[derive(Debug, Error)]
pub enum PruneError {
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid pruning configuration: {0}")]
    Config(String),
    #[error("reweighted training diverged in outer iteration {iteration}: {source}")]
    Diverged {
        iteration: usize,
        #[source]
        source: NnError,
    },
}
