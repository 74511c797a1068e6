use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use geotrec_core::corpus::SplitSpec;
use geotrec_core::diagnostics::DiagConfig;
use geotrec_core::enrichment::EnrichConfig;
use geotrec_core::evaluation::EvalOptions;
use geotrec_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Mock,
    Replay,
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub seed: u64,
    pub replay: Option<PathBuf>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self { kind: ProviderKind::Mock, seed: 0, replay: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    pub dim: usize,
    pub seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self { dim: 64, seed: 0 }
    }
}

/// Everything a run can be configured with. Each section falls back to its
/// defaults when absent from the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Most recent events kept per user; 0 keeps everything.
    pub max_history_len: usize,
    pub split: SplitSpec,
    pub enrich: EnrichConfig,
    pub provider: ProviderConfig,
    pub embed: EmbedConfig,
    pub diagnose: DiagConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            max_history_len: 200,
            split: SplitSpec::default(),
            enrich: EnrichConfig::default(),
            provider: ProviderConfig::default(),
            embed: EmbedConfig::default(),
            diagnose: DiagConfig::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
            Some("json") => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
            _ => bail!("config {} must end in .toml or .json", path.display()),
        };
        Ok(cfg)
    }

    pub fn history_cap(&self) -> usize {
        if self.max_history_len == 0 {
            usize::MAX
        } else {
            self.max_history_len
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_keeps_defaults() {
        let cfg: RunConfig = toml::from_str("[train]\nmax_epochs = 7\n[train.variant]\narchitecture = \"id_meta\"\n").unwrap();
        assert_eq!(cfg.train.max_epochs, 7);
        assert_eq!(cfg.train.patience, 10);
        assert_eq!(cfg.train.variant.architecture, geotrec_core::model::Architecture::IdMeta);
        assert_eq!(cfg.diagnose.ks, vec![10, 20, 50, 100]);
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
    }
}
