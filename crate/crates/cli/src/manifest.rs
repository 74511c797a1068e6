use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Result;
use geotrec_core::io::{sha256_file, write_atomic};
use serde::Serialize;

#[derive(Clone, Debug, Serialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

/// What a run read, wrote and was configured with. Contains no wall-clock
/// data, so identical runs write identical manifests.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: &'static str,
    pub subcommand: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, Artifact>,
    pub outputs: BTreeMap<String, Artifact>,
}

impl RunManifest {
    pub fn new(subcommand: &str, config: &impl Serialize) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION"),
            subcommand: subcommand.to_string(),
            config: serde_json::to_value(config).expect("config serializes"),
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn seed(&mut self, name: &str, seed: u64) -> &mut Self {
        self.seeds.insert(name.to_string(), seed);
        self
    }

    fn artifact(path: &Path) -> Result<Artifact> {
        Ok(Artifact { path: path.display().to_string(), sha256: sha256_file(path)? })
    }

    pub fn input(&mut self, role: &str, path: &Path) -> Result<&mut Self> {
        self.inputs.insert(role.to_string(), Self::artifact(path)?);
        Ok(self)
    }

    pub fn output(&mut self, role: &str, path: &Path) -> Result<&mut Self> {
        self.outputs.insert(role.to_string(), Self::artifact(path)?);
        Ok(self)
    }

    /// Writes `<anchor>.manifest.json`, or `manifest.json` inside a
    /// directory anchor.
    pub fn write(&self, anchor: &Path) -> Result<PathBuf> {
        let path = if anchor.is_dir() {
            anchor.join("manifest.json")
        } else {
            let mut name = anchor.file_name().unwrap_or_default().to_os_string();
            name.push(".manifest.json");
            anchor.with_file_name(name)
        };
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}
