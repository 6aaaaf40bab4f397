//! Evolutionary proposal generation with ensemble-UCB screening.

mod engine;
mod evaluator;
mod landscape;
mod report;
mod store;

pub use engine::{
    candidate_seed, generate_pool, random_search, run_search, score_pool, select_candidates, step_rng, Evaluation,
    Evaluator, SearchConfig, SearchOutcome,
};
pub use evaluator::{plan_candidate, SupernetPruneEvaluator};
pub use landscape::SyntheticLandscape;
pub use report::{format_report, report, ReportRow, REALTIME_MS};
pub use store::{ObservationStore, Record};

use thiserror::Error;

use crate::predictor::PredictorError;
use crate::search_space::SpaceError;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("every candidate in the space has been evaluated")]
    Exhausted,
    #[error("candidate {0} is already in the store")]
    Duplicate(String),
    #[error("invalid search configuration: {0}")]
    Config(String),
    #[error("store line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
