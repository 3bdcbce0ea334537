//! Run manifest written next to every command's outputs.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to rerun a command bit-exactly. No wall-clock fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub base_seed: u64,
    /// Derived per-episode seeds, when the command runs a seed list.
    pub seeds: Vec<u64>,
    pub policies: Vec<String>,
    pub out_dir: String,
    pub outputs: Vec<OutputFile>,
}

impl RunManifest {
    pub fn new(command: &str, config_hash: String, base_seed: u64, out_dir: &Path) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_hash,
            base_seed,
            seeds: Vec::new(),
            policies: Vec::new(),
            out_dir: out_dir.display().to_string(),
            outputs: Vec::new(),
        }
    }
}

/// Collects output files, then writes them and the manifest that lists
/// them with their digests.
pub struct Outputs {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

impl Outputs {
    pub fn new(dir: PathBuf, manifest: RunManifest) -> anyhow::Result<Self> {
        std::fs::create_dir_all(&dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Outputs { dir, manifest })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> anyhow::Result<PathBuf> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        let digest = Sha256::digest(bytes);
        self.manifest.outputs.push(OutputFile {
            path: name.to_string(),
            sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
        });
        Ok(path)
    }

    pub fn finish(mut self) -> anyhow::Result<PathBuf> {
        self.manifest.outputs.sort_by(|a, b| a.path.cmp(&b.path));
        let text = serde_json::to_string_pretty(&self.manifest)?;
        let path = self.dir.join(MANIFEST_FILE);
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
