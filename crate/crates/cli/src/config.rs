use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ooc_core::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// Everything a run needs, as stored in a TOML file. Command-line flags
/// override individual values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Generation service URL, or `"stub"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vlm_endpoint: Option<String>,
    /// Model shape. When absent, dimensions come from the training archive
    /// and everything else takes its default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub paths: Paths,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Root holding `train/`, `validation/` and `test/` archives.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("cannot parse config {}", path.display()))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

/// First of flag, config value; errors with `what` when both are missing.
pub fn pick_path(flag: Option<PathBuf>, config: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| config.clone())
        .with_context(|| format!("no {what} given (pass the flag or set it under [paths])"))
}
