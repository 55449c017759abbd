//! Per-stage JSON manifests with content hashes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use maet_core::Result;

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_bytes(&fs::read(path)?))
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub stage: String,
    pub version: &'static str,
    pub config_sha256: String,
    pub seed: u64,
    pub threads: usize,
    /// File name to sha256, for files read by the stage.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub seconds: f64,
    pub residuals: serde_json::Value,
}

/// Collects hashes while a stage runs, then writes `manifest_<stage>.json`.
pub struct Recorder {
    out: PathBuf,
    manifest: Manifest,
}

impl Recorder {
    pub fn new(stage: &str, out: &Path, config_sha256: &str, seed: u64) -> Self {
        Self {
            out: out.to_path_buf(),
            manifest: Manifest {
                stage: stage.to_string(),
                version: env!("CARGO_PKG_VERSION"),
                config_sha256: config_sha256.to_string(),
                seed,
                threads: rayon::current_num_threads(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                seconds: 0.0,
                residuals: serde_json::Value::Null,
            },
        }
    }

    pub fn input(&mut self, name: &str) -> Result<PathBuf> {
        let path = self.out.join(name);
        let hash = sha256_file(&path)?;
        self.manifest.inputs.insert(name.to_string(), hash);
        Ok(path)
    }

    pub fn output(&mut self, name: &str) -> Result<()> {
        let hash = sha256_file(&self.out.join(name))?;
        self.manifest.outputs.insert(name.to_string(), hash);
        Ok(())
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn finish(mut self, seconds: f64, residuals: serde_json::Value) -> Result<Manifest> {
        self.manifest.seconds = seconds;
        self.manifest.residuals = residuals;
        let path = self.out.join(format!("manifest_{}.json", self.manifest.stage));
        fs::write(path, serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(self.manifest)
    }
}
