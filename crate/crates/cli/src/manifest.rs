//! Run manifests: what ran, with which config and inputs, and what it wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Job;

pub const FILE_NAME: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub versions: BTreeMap<String, String>,
    pub job: Job,
    pub seed: u64,
    pub config_sha256: String,
    pub config_text: String,
    pub inputs: BTreeMap<String, InputFile>,
    pub outputs: BTreeMap<String, String>,
    /// Set when the run failed after producing partial outputs.
    pub failure: Option<String>,
}

impl Manifest {
    pub fn versions() -> BTreeMap<String, String> {
        BTreeMap::from([
            ("ctm-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("ctm-core".to_string(), ctm_core::VERSION.to_string()),
            (
                "checkpoint-format".to_string(),
                ctm_core::netcore::checkpoint::VERSION.to_string(),
            ),
        ])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("malformed manifest {}", path.display()))
    }
}
