//! Run configuration: a TOML file mirroring the command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use procdit_core::dit::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Model settings plus paths and backend choices. Every key is optional in
/// the file; flags override whatever the file sets.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recipe: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// `off`, `mock` or an endpoint URL.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub agent: Option<String>,
    /// `builtin` or an endpoint URL.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedder: Option<String>,
    /// `off`, `mock` or an endpoint URL.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub llm: Option<String>,
    pub model: ModelConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration is always representable")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use procdit_core::dit::FusionSchedule;
    use procdit_core::regional::RegionalMask;

    #[test]
    fn roundtrip_is_lossless() {
        let mut cfg = RunConfig {
            recipe: Some("r.json".into()),
            llm: Some("mock".into()),
            ..Default::default()
        };
        cfg.model.alpha = 0.25;
        cfg.model.regional_mask = RegionalMask::AllOnes;
        cfg.model.fusion = FusionSchedule::Steps(vec![0, 3]);
        let text = cfg.to_toml();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = RunConfig::parse("agent = \"mock\"\n[model]\nalpha = 0.5\nsampler_steps = 4\n").unwrap();
        assert_eq!(cfg.agent.as_deref(), Some("mock"));
        assert_eq!(cfg.model.alpha, 0.5);
        assert_eq!(cfg.model.hidden, ModelConfig::default().hidden);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("colour = 1\n").is_err());
    }
}
