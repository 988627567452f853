//! Config-file plumbing: flat TOML sections, unknown keys rejected.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use puembed_core::data::SynthSpec;
use puembed_core::encoder::ModelConfig;
use puembed_core::trainer::TrainConfig;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub synth: Option<SynthSpec>,
}

pub fn load(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let config: FileConfig =
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    Ok(config)
}

/// The fully resolved configuration echoed into every training run's output
/// directory.
#[derive(Debug, Serialize)]
pub struct Echo<'a> {
    pub data: String,
    pub label_names: &'a [String],
    pub priors: &'a [f64],
    pub train: &'a TrainConfig,
    pub model: &'a ModelConfig,
}
