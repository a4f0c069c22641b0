//! Output bookkeeping: every file a command writes is hashed into manifest.json
//! next to the resolved config, seeds and wall-clock metrics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sepsis_core::{Error, Result};

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub workers: usize,
    pub resolved_config: RunConfig,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
    /// Wall-clock timings and other run measurements; not part of any output hash.
    pub metrics: BTreeMap<String, f64>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Collects outputs of one command run under an output directory.
pub struct Run {
    pub out_dir: PathBuf,
    command: String,
    config: RunConfig,
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
    pub metrics: BTreeMap<String, f64>,
    start: Instant,
}

impl Run {
    pub fn new(command: &str, out_dir: &Path, config: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(out_dir)?;
        Ok(Run {
            out_dir: out_dir.to_path_buf(),
            command: command.into(),
            config: config.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            metrics: BTreeMap::new(),
            start: Instant::now(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)?;
        self.outputs.retain(|e| e.path != name);
        self.outputs.push(FileEntry { path: name.into(), sha256: sha256_hex(bytes), bytes: bytes.len() as u64 });
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Read an upstream artifact, checking it against the manifest that sits
    /// beside it when there is one.
    pub fn read_input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Config(format!("cannot read input {}: {e}", path.display())))?;
        let hash = sha256_hex(&bytes);
        verify_against_manifest(path, &hash)?;
        self.inputs.push(FileEntry { path: path.display().to_string(), sha256: hash, bytes: bytes.len() as u64 });
        Ok(bytes)
    }

    pub fn metric(&mut self, key: &str, value: f64) {
        self.metrics.insert(key.into(), value);
    }

    pub fn finish(mut self) -> Result<RunManifest> {
        self.metrics.insert("wall_seconds".into(), self.start.elapsed().as_secs_f64());
        self.outputs.sort_by(|a, b| a.path.cmp(&b.path));
        let m = RunManifest {
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed: self.config.seed,
            workers: self.config.workers,
            resolved_config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
            metrics: self.metrics,
        };
        let mut text = serde_json::to_string_pretty(&m)?;
        text.push('\n');
        std::fs::write(self.out_dir.join(MANIFEST_FILE), text)?;
        Ok(m)
    }
}

fn verify_against_manifest(path: &Path, hash: &str) -> Result<()> {
    let Some(dir) = path.parent() else { return Ok(()) };
    let manifest_path = dir.join(MANIFEST_FILE);
    let Ok(text) = std::fs::read_to_string(&manifest_path) else { return Ok(()) };
    let m: RunManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("unreadable manifest {}: {e}", manifest_path.display())))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    if let Some(entry) = m.outputs.iter().find(|e| e.path == name) {
        if entry.sha256 != hash {
            return Err(Error::Config(format!(
                "{} does not match the hash recorded in {} (expected {}, found {hash})",
                path.display(),
                manifest_path.display(),
                entry.sha256
            )));
        }
    }
    Ok(())
}
