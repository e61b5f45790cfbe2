//! Run manifests: every command writes one JSON manifest capturing the
//! fully resolved configuration, seed, input/output paths with content
//! hashes, and wall-clock duration — enough to re-run the command
//! identically.

use std::fs;
use std::path::Path;

use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct PathEntry {
    pub path: String,
    /// FNV-1a 64-bit hash of the file contents, hex; absent for
    /// directories.
    pub fnv1a64: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// Fully resolved configuration (all defaults materialized).
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<PathEntry>,
    pub outputs: Vec<PathEntry>,
    pub duration_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings: Option<serde_json::Value>,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    hash
}

pub fn entry(path: &Path) -> PathEntry {
    let hash = fs::read(path).ok().map(|b| format!("{:016x}", fnv1a64(&b)));
    PathEntry { path: path.display().to_string(), fnv1a64: hash }
}

pub fn dir_entry(path: &Path) -> PathEntry {
    PathEntry { path: path.display().to_string(), fnv1a64: None }
}

pub fn write(manifest: &RunManifest, path: &Path) -> alamo::Result<()> {
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| alamo::Error::format(e.to_string()))?;
    fs::write(path, json)?;
    Ok(())
}
