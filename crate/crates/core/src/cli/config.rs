use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cvae_model::ModelConfig;
use crate::error::{invalid, Result};
use crate::trainer::TrainConfig;

/// Everything a training run needs, as one JSON document. Every key is
/// optional; unknown keys are rejected.
///
/// ```
/// use probreg::cli::config::RunConfig;
///
/// let cfg = RunConfig::from_json(r#"{"model": {"dims": [32, 32]}, "train": {"epochs": 2}}"#).unwrap();
/// assert_eq!(cfg.model.latent_dim, 16);
/// assert_eq!(cfg.train.epochs, 2);
/// assert!(RunConfig::from_json(r#"{"modle": {}}"#).is_err());
/// ```
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
