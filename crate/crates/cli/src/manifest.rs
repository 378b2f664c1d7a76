//! `<command>_run.json`: what produced a directory's artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use nammkit_core::config::RunConfig;
use nammkit_core::error::NammError;
use serde::{Deserialize, Serialize};

/// Bumped whenever a command changes the layout of what it writes.
pub const ARTIFACT_VERSION: u32 = 1;
pub const MANIFEST_SUFFIX: &str = "_run.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool_version: String,
    pub artifact_version: u32,
    pub command: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Result<Self> {
        Ok(Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            artifact_version: ARTIFACT_VERSION,
            command: command.to_string(),
            config_hash: config.hash()?,
            config: config.clone(),
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        })
    }

    pub fn seed(mut self, name: &str, value: u64) -> Self {
        self.seeds.insert(name.to_string(), value);
        self
    }

    pub fn input(mut self, name: &str, value: impl ToString) -> Self {
        self.inputs.insert(name.to_string(), value.to_string());
        self
    }

    pub fn path(dir: &Path, command: &str) -> PathBuf {
        dir.join(format!("{command}{MANIFEST_SUFFIX}"))
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = Self::path(dir, &self.command);
        fs::write(&path, serde_json::to_vec_pretty(self)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| NammError::format(0, format!("{}: {e}", path.display())).into())
    }

    /// Every manifest in `dir`, sorted by file name.
    pub fn load_all(dir: &Path) -> Result<Vec<(PathBuf, Self)>> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .with_context(|| format!("listing {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(MANIFEST_SUFFIX)))
            .collect();
        paths.sort();
        paths.into_iter().map(|p| Ok((p.clone(), Self::load(&p)?))).collect()
    }
}
