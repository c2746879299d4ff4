//! The run manifest: which stage wrote which file, from which config and seeds.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use oct_stroke::{Error, Result};

use crate::config::hex;
use crate::io::{read_json, write_json};

pub const MANIFEST_FILE: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Output path relative to the run directory, mapped to its SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub started: String,
    pub finished: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub software_version: String,
    pub seeds: BTreeMap<String, u64>,
    pub stages: BTreeMap<String, StageRecord>,
    /// Hash of everything above except timestamps.
    pub manifest_hash: String,
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(config_hash: &str, seeds: BTreeMap<String, u64>) -> Self {
        let mut m = RunManifest {
            run_id: config_hash[..16].to_string(),
            config_hash: config_hash.to_string(),
            software_version: env!("CARGO_PKG_VERSION").to_string(),
            seeds,
            stages: BTreeMap::new(),
            manifest_hash: String::new(),
        };
        m.rehash();
        m
    }

    /// Loads the manifest in `dir` if it was written for the same config;
    /// otherwise starts a fresh one.
    pub fn open(dir: &Path, config_hash: &str, seeds: BTreeMap<String, u64>) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if path.exists() {
            let m: RunManifest = read_json(&path)?;
            if m.config_hash == config_hash {
                return Ok(m);
            }
            log::warn!("{} was written for another config; starting a new manifest", path.display());
        }
        Ok(Self::new(config_hash, seeds))
    }

    pub fn record(&mut self, dir: &Path, stage: &str, outputs: &[std::path::PathBuf], started: String) -> Result<()> {
        let mut files = BTreeMap::new();
        for p in outputs {
            let rel = p.strip_prefix(dir).unwrap_or(p).to_string_lossy().replace('\\', "/");
            files.insert(rel, file_digest(p)?);
        }
        self.stages.insert(
            stage.to_string(),
            StageRecord {
                outputs: files,
                started,
                finished: now(),
            },
        );
        self.rehash();
        Ok(())
    }

    fn rehash(&mut self) {
        let mut h = Sha256::new();
        for part in [&self.run_id, &self.config_hash, &self.software_version] {
            h.update(part.as_bytes());
            h.update([0]);
        }
        for (k, v) in &self.seeds {
            h.update(format!("seed {k}={v}\n").as_bytes());
        }
        for (stage, rec) in &self.stages {
            for (path, digest) in &rec.outputs {
                h.update(format!("{stage}\t{path}\t{digest}\n").as_bytes());
            }
        }
        self.manifest_hash = hex(&h.finalize());
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }

    /// Every recorded output path, relative to the run directory.
    pub fn all_outputs(&self) -> impl Iterator<Item = &String> {
        self.stages.values().flat_map(|r| r.outputs.keys())
    }
}

pub fn now() -> String {
    chrono::Utc::now().format("%Y-%m-%dT%H:%M:%SZ").to_string()
}
