//! Reproducibility manifests: the resolved config, seeds, and SHA-256 hashes
//! of every input and output file of a stage. No timestamps, so rerunning a
//! stage yields an identical manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::image::write_file;

pub const MANIFEST_DIR: &str = "manifests";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    /// Path relative to the run directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub dataset: u64,
    pub train: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub stage: String,
    pub config: RunConfig,
    pub seeds: Seeds,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    /// Hash over the sorted output list, like a git tree id.
    pub content_hash: String,
}

impl RunManifest {
    pub fn new(stage: &str, config: &RunConfig, inputs: Vec<FileHash>, outputs: Vec<FileHash>) -> Self {
        let content_hash = tree_hash(&outputs);
        RunManifest {
            version: 1,
            stage: stage.to_string(),
            config: config.clone(),
            seeds: Seeds {
                dataset: config.dataset.seed,
                train: config.train.seed,
            },
            inputs,
            outputs,
            content_hash,
        }
    }

    pub fn path(run_dir: &Path, stage: &str) -> std::path::PathBuf {
        run_dir.join(MANIFEST_DIR).join(format!("{stage}.json"))
    }

    pub fn write(&self, run_dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_file(&Self::path(run_dir, &self.stage), text.as_bytes())
    }

    pub fn load(run_dir: &Path, stage: &str) -> Result<Self> {
        let path = Self::path(run_dir, stage);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn tree_hash(files: &[FileHash]) -> String {
    let mut h = Sha256::new();
    for f in files {
        h.update(f.sha256.as_bytes());
        h.update(b" ");
        h.update(f.path.as_bytes());
        h.update(b"\n");
    }
    hex(&h.finalize())
}

/// Hashes every file under `run_dir/rel` (a file or a directory), sorted by
/// path. A missing path yields an empty list.
pub fn hash_tree(run_dir: &Path, rel: &str) -> Result<Vec<FileHash>> {
    let mut out = Vec::new();
    let root = run_dir.join(rel);
    if root.is_file() {
        out.push(hash_file(run_dir, rel)?);
    } else if root.is_dir() {
        walk(run_dir, rel, &mut out)?;
    }
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

fn walk(run_dir: &Path, rel: &str, out: &mut Vec<FileHash>) -> Result<()> {
    let dir = run_dir.join(rel);
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let child = format!("{rel}/{name}");
        let ty = entry.file_type().map_err(|e| Error::io(entry.path(), e))?;
        if ty.is_dir() {
            walk(run_dir, &child, out)?;
        } else {
            out.push(hash_file(run_dir, &child)?);
        }
    }
    Ok(())
}

fn hash_file(run_dir: &Path, rel: &str) -> Result<FileHash> {
    let path = run_dir.join(rel);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(FileHash {
        path: rel.to_string(),
        sha256: sha256_hex(&bytes),
    })
}

/// Files whose hash differs from (or is missing relative to) `expected`.
pub fn mismatches(run_dir: &Path, expected: &[FileHash]) -> Result<Vec<String>> {
    let mut bad = Vec::new();
    for f in expected {
        let path = run_dir.join(&f.path);
        match std::fs::read(&path) {
            Ok(bytes) if sha256_hex(&bytes) == f.sha256 => {}
            _ => bad.push(f.path.clone()),
        }
    }
    Ok(bad)
}
