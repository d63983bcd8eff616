//! Run manifests: per-stage status plus a checksummed index of every file
//! a run emits.

use freqlab_core::checksum::crc32;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub enum StageStatus {
    Ok,
    Failed(String),
    Skipped,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileRecord {
    /// Path relative to the run directory.
    pub path: String,
    pub bytes: u64,
    pub crc32: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    /// Hash of the fully-resolved configuration.
    pub config_hash: String,
    pub created_unix: u64,
    pub stages: Vec<StageRecord>,
    pub files: Vec<FileRecord>,
}

impl RunManifest {
    pub fn new(config_hash: u64) -> Self {
        RunManifest {
            tool_version: TOOL_VERSION.to_string(),
            config_hash: format!("{config_hash:016x}"),
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            stages: Vec::new(),
            files: Vec::new(),
        }
    }

    pub fn record_stage(&mut self, name: &str, status: StageStatus, seconds: f64) {
        self.stages.push(StageRecord { name: name.to_string(), status, seconds });
    }

    /// Register an emitted file, checksumming its current on-disk content.
    pub fn record_file(&mut self, run_dir: &Path, rel: &str) -> std::io::Result<()> {
        let bytes = std::fs::read(run_dir.join(rel))?;
        self.files.retain(|f| f.path != rel);
        self.files.push(FileRecord {
            path: rel.to_string(),
            bytes: bytes.len() as u64,
            crc32: crc32(&bytes),
        });
        Ok(())
    }

    pub fn any_failed(&self) -> bool {
        self.stages.iter().any(|s| matches!(s.status, StageStatus::Failed(_)))
    }

    pub fn save(&self, run_dir: &Path) -> std::io::Result<PathBuf> {
        let path = run_dir.join("manifest.json");
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, json)?;
        Ok(path)
    }

    pub fn load(run_dir: &Path) -> std::io::Result<RunManifest> {
        let text = std::fs::read_to_string(run_dir.join("manifest.json"))?;
        serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    /// Re-checksum every indexed file; returns the paths that no longer
    /// match.
    pub fn verify(&self, run_dir: &Path) -> std::io::Result<Vec<String>> {
        let mut bad = Vec::new();
        for f in &self.files {
            let bytes = std::fs::read(run_dir.join(&f.path))?;
            if crc32(&bytes) != f.crc32 || bytes.len() as u64 != f.bytes {
                bad.push(f.path.clone());
            }
        }
        Ok(bad)
    }
}
