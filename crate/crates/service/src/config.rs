use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use triadic_core::optimizer::OptimizerConfig;
use triadic_core::selection::{BatchComposition, SelectionStrategy};
use triadic_core::ModelKind;

use crate::error::ServiceError;

/// Service settings, read from a TOML file. Every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: String,
    /// Identifier clients pass when opening a session.
    pub dataset_id: String,
    pub dataset_path: PathBuf,
    /// Holds the observation log and the latest checkpoint.
    pub data_dir: PathBuf,
    pub model: ModelKind,
    pub dim: usize,
    /// `None` picks (2,5,5), or (2,10,0) for the two-answer baseline.
    pub composition: Option<BatchComposition>,
    pub strategy: SelectionStrategy,
    pub seed: u64,
    /// Start a training job after this many accepted batches; 0 disables.
    pub auto_train_every: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            dataset_id: "sample".into(),
            dataset_path: PathBuf::from("crates/core/data/sample.jsonl"),
            data_dir: PathBuf::from("triadic-data"),
            model: ModelKind::ThreeAnswer,
            dim: 2,
            composition: None,
            strategy: SelectionStrategy::default(),
            seed: 0,
            auto_train_every: 8,
            optimizer: OptimizerConfig::default(),
        }
    }
}

/// Environment variables that override file settings.
pub const ENV_OVERRIDES: [&str; 6] =
    ["TRIADIC_LISTEN", "TRIADIC_DATASET_ID", "TRIADIC_DATASET", "TRIADIC_DATA_DIR", "TRIADIC_MODEL", "TRIADIC_SEED"];

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, ServiceError> {
        let config: Self = toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ServiceError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Applies `TRIADIC_*` overrides from `vars`.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<(), ServiceError> {
        for (key, value) in vars {
            match key.as_str() {
                "TRIADIC_LISTEN" => self.listen = value,
                "TRIADIC_DATASET_ID" => self.dataset_id = value,
                "TRIADIC_DATASET" => self.dataset_path = value.into(),
                "TRIADIC_DATA_DIR" => self.data_dir = value.into(),
                "TRIADIC_MODEL" => {
                    self.model = serde_json::from_value(serde_json::Value::String(value.clone()))
                        .map_err(|_| ServiceError::Config(format!("TRIADIC_MODEL: unknown model `{value}`")))?;
                }
                "TRIADIC_SEED" => {
                    self.seed = value.parse().map_err(|_| ServiceError::Config(format!("TRIADIC_SEED: `{value}`")))?;
                }
                _ => {}
            }
        }
        self.validate()
    }

    pub fn composition(&self) -> BatchComposition {
        self.composition.unwrap_or_else(|| BatchComposition::default_for(self.model))
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.dim == 0 {
            return Err(ServiceError::Config("dim must be at least 1".into()));
        }
        self.composition().validate()?;
        self.optimizer.validate()?;
        Ok(())
    }
}
