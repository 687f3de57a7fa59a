//! Run manifests: the reproducibility record of one experiment.
//!
//! A manifest pins the configuration digest, the seed, the code version
//! and a content digest of every output file. Re-running with an identical
//! configuration and seed reproduces identical digests; wall-clock fields
//! are metadata and excluded from that contract.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: String,
    pub code_version: String,
    pub seed: u64,
    pub config_digest: String,
    /// File name -> sha256 of contents, for every output of the run.
    pub outputs: BTreeMap<String, String>,
    pub started_unix_ms: u64,
    pub wall_ms: u64,
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    Ok(digest_bytes(&bytes))
}

pub fn now_unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(experiment: &str, seed: u64, config_digest: String) -> Self {
        RunManifest {
            experiment: experiment.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_digest,
            outputs: BTreeMap::new(),
            started_unix_ms: now_unix_ms(),
            wall_ms: 0,
        }
    }

    /// Registers an output file by digesting its current contents.
    pub fn add_output(&mut self, dir: &Path, name: &str) -> Result<()> {
        let digest = digest_file(&dir.join(name))?;
        self.outputs.insert(name.to_string(), digest);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::config("E_JSON", e.to_string()))?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(path.clone(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::config("E_JSON", e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digests_are_stable() {
        assert_eq!(digest_bytes(b"abc"), digest_bytes(b"abc"));
        assert_ne!(digest_bytes(b"abc"), digest_bytes(b"abd"));
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("out.csv"), "t\n1.0\n").unwrap();
        let mut m = RunManifest::new("simulate", 7, digest_bytes(b"cfg"));
        m.add_output(dir.path(), "out.csv").unwrap();
        m.write(dir.path()).unwrap();
        let back = RunManifest::read(dir.path()).unwrap();
        assert_eq!(back.seed, 7);
        assert_eq!(back.outputs, m.outputs);
    }
}
