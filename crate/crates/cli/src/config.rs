//! Pipeline configuration, read from a single TOML document.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use sparsearch::latency::DEFAULT_GRID;
use sparsearch::nn::TrainConfig;
use sparsearch::pruning::ReweightConfig;
use sparsearch::search::SearchConfig;
use sparsearch::sparse::BlockDims;
use sparsearch::supernet::{SupernetConfig, SupernetTrainConfig};

use crate::CliError;

/// Number of supernet cells: derived from the latency table or pinned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CellCount {
    #[default]
    Auto,
    Fixed(usize),
}

impl Serialize for CellCount {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            CellCount::Auto => s.serialize_str("auto"),
            CellCount::Fixed(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for CellCount {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(CellCount::Fixed(n as usize)),
            Raw::S(s) if s == "auto" => Ok(CellCount::Auto),
            Raw::S(s) => Err(serde::de::Error::custom(format!("cells must be \"auto\" or a number, got {s:?}"))),
        }
    }
}

impl fmt::Display for CellCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CellCount::Auto => f.write_str("auto"),
            CellCount::Fixed(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatencySource {
    /// Deterministic cost model.
    #[default]
    Synthetic,
    /// Wall-clock timing of the sparse kernels on this machine.
    Host,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencySection {
    pub source: LatencySource,
    pub grid: Vec<f64>,
    pub reps: usize,
    /// Fixed per-inference cost added to every estimate.
    pub overhead_ms: f64,
    /// Existing table to use instead of building one.
    pub table: Option<PathBuf>,
}

impl Default for LatencySection {
    fn default() -> Self {
        Self {
            source: LatencySource::Synthetic,
            grid: DEFAULT_GRID.to_vec(),
            reps: 5,
            overhead_ms: 0.0,
            table: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub train: usize,
    pub val: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { train: 256, val: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Short retrain after one-shot pruning, per candidate.
    pub retrain: TrainConfig,
    /// Mask-preserving fine-tune of the final model.
    pub finetune: TrainConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            retrain: TrainConfig::default(),
            finetune: TrainConfig {
                epochs: 10,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Latency target t in milliseconds.
    pub target_ms: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub cells: CellCount,
    pub latency: LatencySection,
    /// `cells` here is ignored in favour of the top-level field.
    pub supernet: SupernetConfig,
    pub supernet_train: SupernetTrainConfig,
    pub data: DataSection,
    /// `seed` here is ignored in favour of the top-level field.
    pub search: SearchConfig,
    pub eval: EvalSection,
    pub block: BlockDims,
    pub reweight: ReweightConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            target_ms: sparsearch::search::REALTIME_MS,
            seed: 0,
            output_dir: PathBuf::from("sparsearch-out"),
            cells: CellCount::Auto,
            latency: LatencySection::default(),
            supernet: SupernetConfig::default(),
            supernet_train: SupernetTrainConfig::default(),
            data: DataSection::default(),
            search: SearchConfig::default(),
            eval: EvalSection::default(),
            block: BlockDims::default(),
            reweight: ReweightConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always serializable")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.target_ms > 0.0) || !self.target_ms.is_finite() {
            return Err(CliError::Config(format!("target_ms must be positive, got {}", self.target_ms)));
        }
        if self.cells == CellCount::Fixed(0) {
            return Err(CliError::Config("cells must be at least 1".into()));
        }
        if self.data.train == 0 || self.data.val == 0 {
            return Err(CliError::Config("data.train and data.val must be positive".into()));
        }
        if !(self.latency.overhead_ms >= 0.0) {
            return Err(CliError::Config("latency.overhead_ms must be non-negative".into()));
        }
        self.search.validate().map_err(|e| CliError::Config(e.to_string()))?;
        SupernetConfig { cells: 1, ..self.supernet }
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    /// SHA-256 of the canonical TOML form, hex encoded. The output
    /// directory and job count do not affect results and are left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.search.jobs = 1;
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }

    pub fn search_config(&self, jobs: usize) -> SearchConfig {
        SearchConfig {
            seed: self.seed,
            jobs,
            ..self.search
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(PipelineConfig::from_toml("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = PipelineConfig::default();
        c.cells = CellCount::Fixed(2);
        c.target_ms = 0.5;
        c.search.c = 30;
        let back = PipelineConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = PipelineConfig::from_toml("cells = 3\n[search]\nb = 4\n[eval.retrain]\nepochs = 1\n").unwrap();
        assert_eq!(c.cells, CellCount::Fixed(3));
        assert_eq!(c.search.b, 4);
        assert_eq!(c.search.c, SearchConfig::default().c);
        assert_eq!(c.eval.retrain.epochs, 1);
        assert_eq!(c.eval.retrain.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(PipelineConfig::from_toml("target_ms = -1.0").is_err());
        assert!(PipelineConfig::from_toml("cells = \"many\"").is_err());
        assert!(PipelineConfig::from_toml("cells = 0").is_err());
        assert!(PipelineConfig::from_toml("[search]\nb = 500").is_err());
        assert!(PipelineConfig::from_toml("unknown = [").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::default();
        let b = PipelineConfig { seed: 1, ..a.clone() };
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let mut c = a.clone();
        c.output_dir = PathBuf::from("elsewhere");
        c.search.jobs = 4;
        assert_eq!(a.hash(), c.hash());
    }
}
