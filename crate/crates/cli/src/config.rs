//! JSON configuration file. Values are merged as defaults < file < flags.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use topicmatch::evaluator::EvalConfig;
use topicmatch::synth_data::SceneParams;
use topicmatch::trainer::TrainConfig;

use crate::error::{CliError, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub version: u32,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub scene: SceneParams,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl Default for ConfigFile {
    fn default() -> Self {
        Self { version: CONFIG_VERSION, train: TrainConfig::default(), scene: SceneParams::default(), eval: EvalConfig::default() }
    }
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ConfigFile = serde_json::from_str(text).map_err(|e| CliError::Config(format!("config file: {e}")))?;
        if cfg.version != CONFIG_VERSION {
            return Err(CliError::Config(format!("config version {} is not supported (expected {CONFIG_VERSION})", cfg.version)));
        }
        Ok(cfg)
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(ConfigFile::parse(r#"{"version": 1, "trian": {}}"#), Err(CliError::Config(_))));
        assert!(matches!(ConfigFile::parse(r#"{"version": 1, "train": {"learning_rate": 1}}"#), Err(CliError::Config(_))));
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg = ConfigFile::parse(r#"{"version": 1, "train": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.scene, SceneParams::default());
    }

    #[test]
    fn version_is_checked() {
        assert!(ConfigFile::parse(r#"{"version": 2}"#).is_err());
        assert!(ConfigFile::parse(r#"{}"#).is_err());
    }
}
