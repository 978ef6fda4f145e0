use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use slicemap::eval::{EvalOptions, MotionOptions};
use slicemap::model::ModelConfig;
use slicemap::volume::PhantomSpec;

/// Everything a reproducible run needs. Command-line flags override it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub phantom: PhantomSpec,
    pub eval: EvalOptions,
    pub motion: MotionOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory of `.vol` training volumes.
    pub train: Option<PathBuf>,
    /// Directory of `.vol` test volumes.
    pub test: Option<PathBuf>,
    /// Central fraction of the axial extent that the poses cover.
    pub slab_fraction: f64,
    /// Share of the training volumes held out for the validation loss.
    pub validation_fraction: f64,
    pub validation_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            test: None,
            slab_fraction: 0.75,
            validation_fraction: 0.1,
            validation_seed: 1,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"model": {"epochs": 3}}"#).unwrap();
        assert_eq!(c.model.epochs, 3);
        assert_eq!(c.data, DataConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"modle": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"data": {"slab": 0.5}}"#).is_err());
    }
}
