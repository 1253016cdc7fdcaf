use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const RUN_DIR_ENV: &str = "PCO_RUN_DIR";
const DEFAULT_RUN_ROOT: &str = "runs";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Incomplete,
    Complete,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to reproduce a command: resolved config, seeds,
/// digests of the inputs and the artifacts it writes.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub tool_version: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: BTreeMap<String, InputFile>,
    pub artifacts: Vec<String>,
    #[serde(skip)]
    path: PathBuf,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn digest_file(path: &Path) -> anyhow::Result<InputFile> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(InputFile { path: path.display().to_string(), sha256: sha256_hex(&bytes) })
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seeds: Vec<u64>, inputs: BTreeMap<String, InputFile>, path: PathBuf) -> Self {
        Self {
            command: command.to_string(),
            status: Status::Incomplete,
            error: None,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            seeds,
            inputs,
            artifacts: Vec::new(),
            path,
        }
    }

    /// Digest of command, config and inputs; names default run directories.
    pub fn key(&self) -> String {
        let inputs: Vec<_> = self.inputs.iter().map(|(k, f)| (k, &f.sha256)).collect();
        let body = serde_json::json!({ "command": self.command, "config": self.config, "seeds": self.seeds, "inputs": inputs });
        sha256_hex(body.to_string().as_bytes())[..12].to_string()
    }

    pub fn write(&self) -> anyhow::Result<()> {
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&self.path, text).with_context(|| format!("writing {}", self.path.display()))
    }

    pub fn finish(&mut self, outcome: Result<(), &str>) -> anyhow::Result<()> {
        match outcome {
            Ok(()) => self.status = Status::Complete,
            Err(e) => {
                self.status = Status::Failed;
                self.error = Some(e.to_string());
            }
        }
        self.write()
    }
}

/// `explicit`, or `$PCO_RUN_DIR/<command>-<key>` (root `runs` when unset).
pub fn run_dir(explicit: Option<&Path>, command: &str, key: &str) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let root = std::env::var_os(RUN_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| DEFAULT_RUN_ROOT.into());
            root.join(format!("{command}-{key}"))
        }
    }
}

/// Manifest path for a single-file artifact: `<file>.manifest.json`.
pub fn sidecar(file: &Path) -> PathBuf {
    let mut name = file.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    file.with_file_name(name)
}
