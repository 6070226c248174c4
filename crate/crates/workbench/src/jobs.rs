//! Background jobs: one worker thread, first in first out.
//!
//! A job id is derived from what the job will do, so submitting the same
//! work twice returns the existing job. Only a failed job is run again.

use std::collections::HashMap;
use std::sync::mpsc::{channel, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Result, WorkbenchError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Succeeded,
    Failed,
}

impl JobStatus {
    pub fn is_finished(self) -> bool {
        matches!(self, JobStatus::Succeeded | JobStatus::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub kind: String,
    pub run_id: String,
    pub status: JobStatus,
    pub submitted_at: DateTime<Utc>,
    #[serde(default)]
    pub finished_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub result: Option<Value>,
    #[serde(default)]
    pub error: Option<String>,
}

type Work = Box<dyn FnOnce() -> Result<Value> + Send>;

#[derive(Default)]
struct Table {
    jobs: HashMap<String, JobRecord>,
}

pub struct JobQueue {
    table: Arc<(Mutex<Table>, Condvar)>,
    tx: Mutex<Sender<(String, Work)>>,
}

impl std::fmt::Debug for JobQueue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("JobQueue").finish_non_exhaustive()
    }
}

impl Default for JobQueue {
    fn default() -> Self {
        Self::new()
    }
}

impl JobQueue {
    pub fn new() -> Self {
        let table: Arc<(Mutex<Table>, Condvar)> = Arc::default();
        let (tx, rx) = channel::<(String, Work)>();
        let worker_table = table.clone();
        std::thread::Builder::new()
            .name("neurodebug-jobs".into())
            .spawn(move || {
                for (id, work) in rx {
                    set(&worker_table, &id, |j| j.status = JobStatus::Running);
                    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(work))
                        .unwrap_or_else(|_| Err(WorkbenchError::InvalidRequest("job panicked".into())));
                    if let Err(e) = &outcome {
                        tracing::warn!(job = %id, error = %e, "job failed");
                    }
                    set(&worker_table, &id, |j| {
                        j.finished_at = Some(Utc::now());
                        match outcome {
                            Ok(v) => {
                                j.status = JobStatus::Succeeded;
                                j.result = Some(v);
                            }
                            Err(e) => {
                                j.status = JobStatus::Failed;
                                j.error = Some(e.to_string());
                            }
                        }
                    });
                }
            })
            .expect("spawn job worker");
        Self {
            table,
            tx: Mutex::new(tx),
        }
    }

    /// Queue `work` under `id` unless a job with that id is queued, running
    /// or has succeeded; returns the job as it stands.
    pub fn submit<F>(&self, id: String, kind: &str, run_id: &str, work: F) -> JobRecord
    where
        F: FnOnce() -> Result<Value> + Send + 'static,
    {
        let (lock, _) = &*self.table;
        let mut table = lock.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(existing) = table.jobs.get(&id) {
            if existing.status != JobStatus::Failed {
                return existing.clone();
            }
        }
        let record = JobRecord {
            id: id.clone(),
            kind: kind.into(),
            run_id: run_id.into(),
            status: JobStatus::Queued,
            submitted_at: Utc::now(),
            finished_at: None,
            result: None,
            error: None,
        };
        table.jobs.insert(id.clone(), record.clone());
        drop(table);
        let tx = self.tx.lock().unwrap_or_else(|e| e.into_inner());
        if tx.send((id.clone(), Box::new(work))).is_err() {
            set(&self.table, &id, |j| {
                j.status = JobStatus::Failed;
                j.error = Some("job worker has stopped".into());
            });
        }
        record
    }

    pub fn get(&self, id: &str) -> Result<JobRecord> {
        let (lock, _) = &*self.table;
        lock.lock()
            .unwrap_or_else(|e| e.into_inner())
            .jobs
            .get(id)
            .cloned()
            .ok_or_else(|| WorkbenchError::UnknownJob(id.into()))
    }

    /// Block until the job finishes or `timeout` passes.
    pub fn wait(&self, id: &str, timeout: Duration) -> Result<JobRecord> {
        let deadline = Instant::now() + timeout;
        let (lock, cvar) = &*self.table;
        let mut table = lock.lock().unwrap_or_else(|e| e.into_inner());
        loop {
            let job = table.jobs.get(id).cloned().ok_or_else(|| WorkbenchError::UnknownJob(id.into()))?;
            let now = Instant::now();
            if job.status.is_finished() || now >= deadline {
                return Ok(job);
            }
            table = cvar
                .wait_timeout(table, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }
}

fn set(table: &Arc<(Mutex<Table>, Condvar)>, id: &str, f: impl FnOnce(&mut JobRecord)) {
    let (lock, cvar) = &**table;
    if let Some(j) = lock.lock().unwrap_or_else(|e| e.into_inner()).jobs.get_mut(id) {
        f(j);
    }
    cvar.notify_all();
}
