//! Provenance written next to every command's artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Versions {
    pub dfr_cli: String,
    pub dfr_core: String,
}

impl Versions {
    pub fn current() -> Self {
        Self {
            dfr_cli: env!("CARGO_PKG_VERSION").to_string(),
            dfr_core: dfr_core::VERSION.to_string(),
        }
    }
}

/// Everything needed to rerun a command: its name, the resolved document
/// (seed included) and the content hashes of what it read and wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub versions: Versions,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    /// Relative to the output directory.
    pub outputs: Vec<FileDigest>,
    /// Seconds since the Unix epoch. The only non-reproducible field.
    pub created_unix: u64,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        Ok(crate::config::parse(&text)?)
    }

    /// Fails unless every recorded input still has its recorded hash.
    pub fn check_inputs(&self) -> Result<()> {
        for input in &self.inputs {
            let now = sha256_file(&input.path)?;
            if now != input.sha256 {
                bail!(
                    "input {} changed since the manifest was written (sha256 {} != {})",
                    input.path.display(),
                    now,
                    input.sha256
                );
            }
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

pub fn digest(path: &Path) -> Result<FileDigest> {
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: sha256_file(path)?,
    })
}

/// Collects the files a command writes into its output directory.
#[derive(Debug)]
pub struct Artifacts {
    dir: PathBuf,
    names: Vec<String>,
}

impl Artifacts {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            names: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Path for a new artifact `name`, recorded for the manifest.
    pub fn path(&mut self, name: &str) -> Result<PathBuf> {
        if name == MANIFEST_FILE || self.names.iter().any(|n| n == name) {
            bail!("artifact name {name:?} used twice");
        }
        self.names.push(name.to_string());
        Ok(self.dir.join(name))
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name)?;
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn digests(&self) -> Result<Vec<FileDigest>> {
        self.names
            .iter()
            .map(|n| {
                Ok(FileDigest {
                    path: PathBuf::from(n),
                    sha256: sha256_file(&self.dir.join(n))?,
                })
            })
            .collect()
    }
}
