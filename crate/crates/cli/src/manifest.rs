use std::path::{Path, PathBuf};

use protoda::checkpoint::Archive;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub role: String,
    pub path: PathBuf,
    /// Content hash of checkpoint payloads.
    pub content_hash: Option<String>,
}

impl Artifact {
    pub fn checkpoint(role: &str, path: &Path) -> protoda::Result<Self> {
        Ok(Self {
            role: role.into(),
            path: path.to_path_buf(),
            content_hash: Some(Archive::read(path)?.content_hash().to_string()),
        })
    }

    pub fn file(role: &str, path: &Path) -> Self {
        Self {
            role: role.into(),
            path: path.to_path_buf(),
            content_hash: None,
        }
    }
}

/// What a command read and wrote, plus everything needed to rerun it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    pub config: RunConfig,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub seconds: f64,
    pub summary: serde_json::Value,
}

impl Manifest {
    /// Writes `manifest.json` and the resolved `config.toml` into `dir`.
    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        std::fs::write(dir.join(CONFIG_FILE), self.config.to_toml()?)?;
        Ok(())
    }
}
