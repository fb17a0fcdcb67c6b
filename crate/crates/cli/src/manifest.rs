//! `run-manifest.json`: effective config, its hash and artifact checksums.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_NAME: &str = "run-manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Subcommand-specific parameters that are not part of the config.
    pub parameters: BTreeMap<String, serde_json::Value>,
    pub config_toml: String,
    pub config_sha256: String,
    /// Relative artifact path -> sha256.
    pub artifacts: BTreeMap<String, String>,
}

/// Writes artifacts under an output directory and remembers them for the
/// manifest.
#[derive(Debug)]
pub struct Recorder {
    out_dir: PathBuf,
    artifacts: BTreeSet<PathBuf>,
}

impl Recorder {
    pub fn new(out_dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
        Ok(Self {
            out_dir: out_dir.to_path_buf(),
            artifacts: BTreeSet::new(),
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.out_dir.join(rel)
    }

    pub fn write(&mut self, rel: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let path = self.out_dir.join(rel.as_ref());
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        self.artifacts.insert(rel.as_ref().to_path_buf());
        Ok(path)
    }

    /// Records a file some other code wrote inside the output directory.
    pub fn record(&mut self, path: &Path) {
        let rel = path.strip_prefix(&self.out_dir).unwrap_or(path);
        self.artifacts.insert(rel.to_path_buf());
    }

    pub fn finish(
        self,
        command: &str,
        parameters: BTreeMap<String, serde_json::Value>,
        config_toml: String,
    ) -> CliResult<PathBuf> {
        let mut artifacts = BTreeMap::new();
        for rel in &self.artifacts {
            let path = self.out_dir.join(rel);
            let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
            let key = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("/");
            artifacts.insert(key, sha256_hex(&bytes));
        }
        let manifest = RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            parameters,
            config_sha256: sha256_hex(config_toml.as_bytes()),
            config_toml,
            artifacts,
        };
        let path = self.out_dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
