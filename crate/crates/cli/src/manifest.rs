use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn version_string() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

/// Everything needed to re-run a command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub rng: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub config_sha256: String,
    pub files: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

impl Manifest {
    pub fn new<T: Serialize>(command: &str, seed: u64, config: &T, files: &[&str]) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        let canonical = serde_json::to_string(&config)?;
        let hash = Sha256::digest(canonical.as_bytes());
        Ok(Self {
            command: command.to_string(),
            version: version_string(),
            rng: c3dpo::rng::RNG_ALGORITHM.to_string(),
            seed,
            config,
            config_sha256: hash.iter().map(|b| format!("{b:02x}")).collect(),
            files: files.iter().map(|s| s.to_string()).collect(),
            wall_time_s: None,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(dir.join(MANIFEST_FILE), text).context("writing manifest")
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.is_file() {
            anyhow::bail!(c3dpo::Error::Config(format!("no manifest found in {}", dir.display())));
        }
        let text = std::fs::read_to_string(&path)?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
