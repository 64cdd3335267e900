//! Run records: what a command was run with, written next to its outputs.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Accelerator selection variable. Only `cpu` is available; other values
/// fall back to it with a warning.
pub const DEVICE_ENV: &str = "REDRY_DEVICE";

pub fn device() -> String {
    match std::env::var(DEVICE_ENV) {
        Ok(d) if d.eq_ignore_ascii_case("cpu") || d.is_empty() => "cpu".into(),
        Ok(d) => {
            eprintln!("warning: {DEVICE_ENV}={d} is not available, using cpu");
            "cpu".into()
        }
        Err(_) => "cpu".into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub command: String,
    pub toolkit_version: String,
    pub seed: u64,
    pub device: String,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    /// SHA-256 over the sorted input digests.
    pub content_hash: String,
    pub outputs: Vec<PathBuf>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Digests of `paths`; directories contribute every file below them.
pub fn digest_inputs(paths: &[&Path]) -> Result<Vec<InputDigest>> {
    let mut files = Vec::new();
    let mut stack: Vec<PathBuf> = paths.iter().map(|p| p.to_path_buf()).collect();
    while let Some(p) = stack.pop() {
        if p.is_dir() {
            for e in std::fs::read_dir(&p).map_err(|e| Error::io(&p, e))? {
                stack.push(e.map_err(|e| Error::io(&p, e))?.path());
            }
        } else {
            files.push(p);
        }
    }
    files.sort();
    files
        .into_iter()
        .map(|path| {
            Ok(InputDigest {
                sha256: sha256_file(&path)?,
                path,
            })
        })
        .collect()
}

impl RunRecord {
    pub fn new(command: &str, seed: u64, config: &impl Serialize, inputs: &[&Path], outputs: &[&Path]) -> Result<Self> {
        let inputs = digest_inputs(inputs)?;
        let mut h = Sha256::new();
        let mut sorted: Vec<&str> = inputs.iter().map(|d| d.sha256.as_str()).collect();
        sorted.sort_unstable();
        for d in sorted {
            h.update(d.as_bytes());
            h.update(b"\n");
        }
        Ok(Self {
            command: command.into(),
            toolkit_version: crate::VERSION.into(),
            seed,
            device: device(),
            config: serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?,
            content_hash: hex(&h.finalize()),
            inputs,
            outputs: outputs.iter().map(|p| p.to_path_buf()).collect(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("run record serializes");
        crate::checkpoint::write_atomic(path, text.as_bytes())
    }
}

/// `<dir>/run-record.json` for directory outputs, `<file>.run-record.json` otherwise.
pub fn record_path(output: &Path) -> PathBuf {
    if output.is_dir() {
        output.join("run-record.json")
    } else {
        let mut s = output.as_os_str().to_owned();
        s.push(".run-record.json");
        s.into()
    }
}
