//! Run manifests: what a command read, what it wrote, and content hashes of
//! both.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// Input name to SHA-256 of its content.
    pub inputs: BTreeMap<String, String>,
    /// Output path to SHA-256 of its content.
    pub outputs: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub version: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>) -> Self {
        RunManifest {
            command: command.to_string(),
            args,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            seed: None,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn input_bytes(&mut self, name: impl Into<String>, bytes: &[u8]) {
        self.inputs.insert(name.into(), sha256_hex(bytes));
    }

    pub fn output(&mut self, path: &Path) -> std::io::Result<()> {
        let bytes = fs::read(path)?;
        self.outputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serialises");
        text.push('\n');
        fs::write(path, text)
    }
}

/// Manifest path for a single-file output: `<out>.manifest.json`.
pub fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}
