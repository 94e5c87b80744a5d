//! Run manifests: configuration snapshot, seed, content hash of the inputs
//! and wall time.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Clone, Debug, Serialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    /// Digest over all input digests, in order.
    pub input_hash: String,
    pub outputs: Vec<PathBuf>,
    pub wall_time_s: f64,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn files_under(root: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).with_context(|| format!("reading {}", dir.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// SHA-256 of a file, or of a directory's relative paths and contents in
/// sorted order.
pub fn digest(path: &Path) -> anyhow::Result<InputDigest> {
    let mut hasher = Sha256::new();
    if path.is_dir() {
        for file in files_under(path)? {
            let rel = file.strip_prefix(path).unwrap_or(&file);
            hasher.update(rel.to_string_lossy().as_bytes());
            hasher.update([0]);
            hasher.update(std::fs::read(&file).with_context(|| format!("hashing {}", file.display()))?);
        }
    } else {
        hasher.update(std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?);
    }
    Ok(InputDigest {
        path: path.to_path_buf(),
        sha256: hex(&hasher.finalize()),
    })
}

pub fn combined_hash(inputs: &[InputDigest]) -> String {
    let mut hasher = Sha256::new();
    for d in inputs {
        hasher.update(d.sha256.as_bytes());
    }
    hex(&hasher.finalize())
}

/// SHA-256 of a serialisable value's canonical JSON text.
pub fn config_hash<T: Serialize>(value: &T) -> anyhow::Result<String> {
    Ok(hex(&Sha256::digest(serde_json::to_vec(value)?)))
}

pub fn write(dir: &Path, manifest: &RunManifest) -> anyhow::Result<()> {
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}
