//! Runs on disk: `{root}/{run_id}/manifest.json` plus artifact files.
//!
//! Artifacts are written once. Writing different bytes to an existing
//! artifact path is an error, and the manifest only ever grows by whole
//! stages, so earlier stages keep their bytes.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use chrono::Utc;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::WorkbenchConfig;
use crate::error::{Result, WorkbenchError};
use crate::manifest::{RunManifest, RunRequest, RunStatus, StageRecord};

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Short content hash of a serializable value, used for idempotency keys.
pub fn content_key<T: Serialize>(parts: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(parts)?)[..16].to_string())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let tmp = path.with_extension(format!("tmp{}", COUNTER.fetch_add(1, Ordering::Relaxed)));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug)]
pub struct RunStore {
    root: PathBuf,
    writers: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl RunStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            writers: Mutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join(run_id)
    }

    fn check_id(run_id: &str) -> Result<()> {
        let ok = !run_id.is_empty() && run_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-');
        if ok {
            Ok(())
        } else {
            Err(WorkbenchError::UnknownRun(run_id.to_string()))
        }
    }

    /// The per-run writer lock. Readers never take it.
    pub fn writer(&self, run_id: &str) -> Arc<Mutex<()>> {
        let mut map = self.writers.lock().unwrap_or_else(|e| e.into_inner());
        map.entry(run_id.to_string()).or_default().clone()
    }

    pub fn create(&self, request: &RunRequest, config: &WorkbenchConfig) -> Result<RunManifest> {
        let now = Utc::now();
        let seed = serde_json::json!({
            "request": request,
            "at": now.timestamp_nanos_opt(),
            "pid": std::process::id(),
        });
        let run_id = loop {
            let candidate = format!("run-{}", content_key(&(&seed, rand_suffix()))?);
            if !self.run_dir(&candidate).exists() {
                break candidate;
            }
        };
        std::fs::create_dir_all(self.run_dir(&run_id))?;
        let manifest = RunManifest {
            run_id: run_id.clone(),
            request: request.clone(),
            config: config.clone(),
            created_at: now,
            updated_at: now,
            status: RunStatus::Pending,
            stages: Vec::new(),
        };
        self.save(&manifest)?;
        Ok(manifest)
    }

    fn save(&self, manifest: &RunManifest) -> Result<()> {
        write_atomic(
            &self.run_dir(&manifest.run_id).join(MANIFEST),
            &serde_json::to_vec_pretty(manifest)?,
        )
    }

    pub fn load(&self, run_id: &str) -> Result<RunManifest> {
        Self::check_id(run_id)?;
        let path = self.run_dir(run_id).join(MANIFEST);
        match std::fs::read(&path) {
            Ok(bytes) => Ok(serde_json::from_slice(&bytes)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(WorkbenchError::UnknownRun(run_id.into())),
            Err(e) => Err(e.into()),
        }
    }

    /// Run ids, oldest first.
    pub fn list(&self) -> Result<Vec<String>> {
        let mut runs = Vec::new();
        for entry in std::fs::read_dir(&self.root)? {
            let entry = entry?;
            if entry.path().join(MANIFEST).exists() {
                if let Ok(m) = self.load(&entry.file_name().to_string_lossy()) {
                    runs.push((m.created_at, m.run_id));
                }
            }
        }
        runs.sort();
        Ok(runs.into_iter().map(|(_, id)| id).collect())
    }

    /// Write an artifact under the run directory and return its digest.
    pub fn write_artifact(&self, run_id: &str, rel: &str, bytes: &[u8]) -> Result<String> {
        Self::check_id(run_id)?;
        if rel.split('/').any(|p| p == ".." || p.is_empty()) {
            return Err(WorkbenchError::InvalidRequest(format!("bad artifact path {rel:?}")));
        }
        let path = self.run_dir(run_id).join(rel);
        let digest = sha256_hex(bytes);
        if path.exists() {
            if sha256_hex(&std::fs::read(&path)?) == digest {
                return Ok(digest);
            }
            return Err(WorkbenchError::Artifact(format!("{run_id}/{rel} already exists with other content")));
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        write_atomic(&path, bytes)?;
        Ok(digest)
    }

    pub fn write_json<T: Serialize>(&self, run_id: &str, rel: &str, value: &T) -> Result<String> {
        self.write_artifact(run_id, rel, &serde_json::to_vec_pretty(value)?)
    }

    pub fn read_artifact(&self, run_id: &str, rel: &str) -> Result<Vec<u8>> {
        Self::check_id(run_id)?;
        std::fs::read(self.run_dir(run_id).join(rel)).map_err(|_| WorkbenchError::Artifact(format!("{run_id}/{rel}")))
    }

    pub fn read_json<T: DeserializeOwned>(&self, run_id: &str, rel: &str) -> Result<T> {
        Ok(serde_json::from_slice(&self.read_artifact(run_id, rel)?)?)
    }

    /// Digest a file that is already in the run directory (written by a
    /// library routine rather than [`RunStore::write_artifact`]).
    pub fn digest_existing(&self, run_id: &str, rel: &str) -> Result<String> {
        Ok(sha256_hex(&self.read_artifact(run_id, rel)?))
    }

    /// Append `stage` and optionally move the run to `status`. Every artifact
    /// the stage names must already exist with its recorded digest.
    pub fn append_stage(&self, run_id: &str, stage: StageRecord, status: Option<RunStatus>) -> Result<RunManifest> {
        let lock = self.writer(run_id);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut manifest = self.load(run_id)?;
        for rel in stage.artifacts.values() {
            let want = stage
                .digests
                .get(rel)
                .ok_or_else(|| WorkbenchError::Artifact(format!("{rel} has no digest")))?;
            if &self.digest_existing(run_id, rel)? != want {
                return Err(WorkbenchError::Artifact(rel.clone()));
            }
        }
        manifest.stages.push(stage);
        if let Some(s) = status {
            manifest.status = s;
        }
        manifest.updated_at = Utc::now();
        self.save(&manifest)?;
        Ok(manifest)
    }

    pub fn set_status(&self, run_id: &str, status: RunStatus) -> Result<RunManifest> {
        let lock = self.writer(run_id);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut manifest = self.load(run_id)?;
        manifest.status = status;
        manifest.updated_at = Utc::now();
        self.save(&manifest)?;
        Ok(manifest)
    }

    /// Check that every artifact the manifest references exists unchanged.
    pub fn verify(&self, manifest: &RunManifest) -> Result<()> {
        for stage in &manifest.stages {
            for rel in stage.artifacts.values() {
                let want = stage.digests.get(rel).ok_or_else(|| WorkbenchError::Artifact(rel.clone()))?;
                if &self.digest_existing(&manifest.run_id, rel)? != want {
                    return Err(WorkbenchError::Artifact(rel.clone()));
                }
            }
        }
        Ok(())
    }
}

fn rand_suffix() -> u64 {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    COUNTER.fetch_add(1, Ordering::Relaxed)
}
