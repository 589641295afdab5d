use std::path::{Path, PathBuf};

use citylike_core::raster::write_atomic;
use citylike_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const PROVENANCE_FILE: &str = "provenance.json";
/// Bumped whenever an artifact layout changes.
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub artifact_version: u32,
}

impl Provenance {
    pub fn new(stage: &str, config_hash: &str, seed: u64) -> Self {
        Provenance {
            stage: stage.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            artifact_version: ARTIFACT_VERSION,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// `<file>.provenance.json` for a single-file artifact.
pub fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".provenance.json");
    artifact.with_file_name(name)
}

/// Hash identifying a standalone command invocation.
pub fn args_hash(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())[..12].to_string()
}
