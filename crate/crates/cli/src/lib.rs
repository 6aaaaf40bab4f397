//! Command-line front end: configuration, artifacts and the end-to-end
//! pipeline. The binary in `main.rs` is a thin wrapper over [`commands`].

pub mod artifact;
pub mod commands;
pub mod config;
pub mod pipeline;

use thiserror::Error;

pub use config::PipelineConfig;
pub use pipeline::{run_pipeline, PipelineSummary, RunOptions};

/// Environment variable capping parallel evaluation jobs.
pub const THREADS_ENV: &str = "SPARSEARCH_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("infeasible target: {0}")]
    Infeasible(String),
    #[error("stage {stage} failed: {source:#}")]
    Stage {
        stage: &'static str,
        source: anyhow::Error,
    },
}

impl CliError {
    pub fn stage(stage: &'static str, e: impl Into<anyhow::Error>) -> Self {
        CliError::Stage {
            stage,
            source: e.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::Stage { .. } => 4,
        }
    }
}

/// Tags an error with the stage it happened in.
pub trait StageResult<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError>;
}

impl<T, E: Into<anyhow::Error>> StageResult<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|e| CliError::stage(stage, e))
    }
}

/// `requested` capped by the environment variable, when set.
pub fn job_count(requested: usize) -> Result<usize, CliError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let cap: usize = v
                .trim()
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
            Ok(requested.max(1).min(cap))
        }
        Err(_) => Ok(requested.max(1)),
    }
}
