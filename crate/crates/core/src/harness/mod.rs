//! Synthetic streams and the end-to-end pipeline in both modes.
//!
//! A run directory holds the stored blocks, per-architecture counters and
//! outputs, join metrics and a `manifest.json` carrying the SHA-256 of the
//! logged event stream. Cross-mode tools refuse runs whose hashes differ.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batcher::{BatchConfig, BatchError};
use crate::cost::CostError;
use crate::joiner::{JoinError, JoinerConfig};
use crate::model::{Architecture, ModelConfig, ModelError};
use crate::schema::SchemaError;
use crate::store::StoreError;

mod audit;
mod generator;
mod impression_join;
mod pipeline;
mod report;

pub use audit::{audit, audit_runs, AuditReport, LabelMismatch};
pub use generator::{
    apply_loss, generate_events, read_events, stream_hash, write_events, GeneratorConfig, ImpressionDist,
    HISTORY_ACTIONS, HISTORY_CONTEXTS, HISTORY_ITEMS,
};
pub use impression_join::{join_impressions, ImpressionJoinMetrics, ImpressionJoinOutput};
pub use pipeline::{load_manifest, run_pipeline, BlockEntry, Manifest, RunSummary};
pub use report::{build_report, render_table, sig6, Report};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("stream hashes differ: {0} vs {1}")]
    StreamMismatch(String, String),
    #[error("missing input: {0}")]
    Missing(String),
    #[error(transparent)]
    Join(#[from] JoinError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Cost(#[from] CostError),
}

impl HarnessError {
    /// 1 for IO and internal failures, 2 for invalid inputs.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Io { .. } | HarnessError::Missing(_) => 1,
            HarnessError::Store(StoreError::Io(_)) => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
        move |source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn json(path: &Path) -> impl FnOnce(serde_json::Error) -> HarnessError + '_ {
        move |source| HarnessError::Json {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Request rows per batch in ROO mode, impression rows per batch in
    /// impression mode.
    pub batch_size: usize,
    /// Samples (or impression rows) per stored block.
    pub block_size: usize,
    pub architectures: Vec<Architecture>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            block_size: 4096,
            architectures: Architecture::ALL.to_vec(),
        }
    }
}

/// Every module's settings in one TOML document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub generator: GeneratorConfig,
    pub joiner: JoinerConfig,
    pub batch: BatchConfig,
    pub model: ModelConfig,
    pub pipeline: PipelineConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let c: Config = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Overrides every seed with `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.generator.seed = seed;
        self.model.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.generator.validate()?;
        self.joiner.validate()?;
        self.model.validate()?;
        if self.pipeline.batch_size == 0 || self.pipeline.block_size == 0 {
            return Err(HarnessError::Config("batch_size and block_size must be > 0".into()));
        }
        Ok(())
    }

    /// Model config with history features filled from the generator's
    /// layout when unset.
    pub fn resolved_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        if m.history_items.is_none() && self.generator.history_len_max > 0 {
            m.history_items = Some(HISTORY_ITEMS);
            m.history_actions = Some(HISTORY_ACTIONS);
            m.history_contexts = Some(HISTORY_CONTEXTS);
        }
        m.num_tasks = self.batch.tasks.len();
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let c = Config::default().with_seed(9);
        let back = Config::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let c = Config::from_toml("[generator]\nnum_users = 3\n[joiner]\ndynamic_trigger = true\n").unwrap();
        assert_eq!(c.generator.num_users, 3);
        assert!(c.joiner.dynamic_trigger);
        assert_eq!(c.pipeline, PipelineConfig::default());
    }

    #[test]
    fn invalid_values_are_validation_errors() {
        let e = Config::from_toml("[generator]\nloss_rate = 1.5\n").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = Config::from_toml("[joiner]\nwindow_ms = 0\n").unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }
}
