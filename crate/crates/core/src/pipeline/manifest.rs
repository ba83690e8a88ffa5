use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use crate::checkpoint::sha256_hex;
use crate::error::{Error, Result};
use crate::io::write_atomic;

/// One file produced by a command, identified by its content digest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact {
    /// Path relative to the run directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Record of one completed command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_digest: String,
    pub seed: u64,
    /// Seconds since the Unix epoch.
    pub started_at: u64,
    pub finished_at: u64,
    pub artifacts: Vec<Artifact>,
    pub metrics: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

pub const MANIFEST_DIR: &str = "manifests";

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn manifest_path(out_dir: &Path, command: &str) -> PathBuf {
    out_dir.join(MANIFEST_DIR).join(format!("{command}.json"))
}

/// Collects artifacts and metrics while a command runs.
pub(crate) struct ManifestBuilder {
    manifest: RunManifest,
    out_dir: PathBuf,
}

impl ManifestBuilder {
    pub fn start(command: &str, cfg: &PipelineConfig) -> Self {
        Self {
            manifest: RunManifest {
                command: command.to_string(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                config_digest: cfg.digest(),
                seed: cfg.seed,
                started_at: now(),
                finished_at: 0,
                artifacts: Vec::new(),
                metrics: BTreeMap::new(),
                warnings: Vec::new(),
            },
            out_dir: cfg.out_dir.clone(),
        }
    }

    pub fn artifact(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let rel = path.strip_prefix(&self.out_dir).unwrap_or(path);
        self.manifest.artifacts.push(Artifact {
            path: rel.to_string_lossy().replace('\\', "/"),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    pub fn metric(&mut self, name: &str, value: f64) {
        self.manifest.metrics.insert(name.to_string(), value);
    }

    pub fn warn(&mut self, message: String) {
        self.manifest.warnings.push(message);
    }

    /// Stamps the finish time and writes the manifest atomically.
    pub fn finish(mut self) -> Result<RunManifest> {
        self.manifest.finished_at = now();
        let path = manifest_path(&self.out_dir, &self.manifest.command);
        let json = serde_json::to_vec_pretty(&self.manifest)
            .map_err(|e| Error::Data(format!("cannot serialise manifest: {e}")))?;
        write_atomic(&path, &json)?;
        Ok(self.manifest)
    }
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::Data(format!("{}: invalid manifest: {e}", path.display())))
    }

    /// Every listed artifact exists under `out_dir` with the recorded digest.
    pub fn verify(&self, out_dir: &Path) -> Result<()> {
        for a in &self.artifacts {
            let path = out_dir.join(&a.path);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if sha256_hex(&bytes) != a.sha256 {
                return Err(Error::Data(format!("{} changed since the manifest was written", a.path)));
            }
        }
        Ok(())
    }
}
