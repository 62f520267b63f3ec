//! Persisted FIFO job queue.
//!
//! [`QueueCore`] is the pure state machine; [`JobQueue`] wraps it with a lock,
//! one JSON file per job and a wake-up signal for the worker loop.

use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use tokio::sync::Notify;

use crate::error::{ApiError, ApiResult};
use crate::store::{is_safe_id, write_atomic, Store};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    Match,
    Finetune,
    Evaluate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    /// `queued → running → (done | failed)` and nothing else.
    pub fn can_become(self, next: JobState) -> bool {
        matches!(
            (self, next),
            (JobState::Queued, JobState::Running) | (JobState::Running, JobState::Done) | (JobState::Running, JobState::Failed)
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub project_id: String,
    pub kind: JobKind,
    pub state: JobState,
    pub progress: f64,
    /// Submission order; the queue runs jobs in increasing `seq`.
    pub seq: u64,
    pub payload: serde_json::Value,
    pub result: Option<serde_json::Value>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum QueueError {
    #[error("unknown job `{0}`")]
    UnknownJob(String),
    #[error("job `{id}` cannot go from {from:?} to {to:?}")]
    IllegalTransition { id: String, from: JobState, to: JobState },
}

impl From<QueueError> for ApiError {
    fn from(e: QueueError) -> Self {
        match e {
            QueueError::UnknownJob(id) => ApiError::not_found("job", &id),
            QueueError::IllegalTransition { .. } => ApiError::conflict(e.to_string()),
        }
    }
}

pub const RESTART_ERROR: &str = "service restarted while the job was running";

/// Scheduling rules without I/O: FIFO over queued jobs, at most one running
/// job per project, monotone progress, and the state machine above.
#[derive(Debug, Default, Clone)]
pub struct QueueCore {
    jobs: BTreeMap<String, JobRecord>,
    next_seq: u64,
}

impl QueueCore {
    /// Rebuilds the queue after a restart. Jobs that were running can no
    /// longer finish and are failed; queued jobs keep their place.
    /// Returns the ids of records that changed.
    pub fn recover(records: Vec<JobRecord>) -> (Self, Vec<String>) {
        let mut core = Self::default();
        let mut changed = Vec::new();
        for mut r in records {
            if r.state == JobState::Running {
                r.state = JobState::Failed;
                r.error = Some(RESTART_ERROR.to_string());
                changed.push(r.id.clone());
            }
            core.next_seq = core.next_seq.max(r.seq + 1);
            core.jobs.insert(r.id.clone(), r);
        }
        (core, changed)
    }

    pub fn submit(&mut self, id: String, project_id: String, kind: JobKind, payload: serde_json::Value) -> JobRecord {
        let rec = JobRecord {
            id: id.clone(),
            project_id,
            kind,
            state: JobState::Queued,
            progress: 0.0,
            seq: self.next_seq,
            payload,
            result: None,
            error: None,
        };
        self.next_seq += 1;
        self.jobs.insert(id, rec.clone());
        rec
    }

    pub fn get(&self, id: &str) -> Option<&JobRecord> {
        self.jobs.get(id)
    }

    pub fn all(&self) -> impl Iterator<Item = &JobRecord> {
        self.jobs.values()
    }

    fn project_busy(&self, project_id: &str) -> bool {
        self.jobs.values().any(|j| j.project_id == project_id && j.state == JobState::Running)
    }

    /// Marks the oldest runnable job as running and returns it.
    pub fn claim(&mut self) -> Option<JobRecord> {
        let id = self
            .jobs
            .values()
            .filter(|j| j.state == JobState::Queued && !self.project_busy(&j.project_id))
            .min_by_key(|j| j.seq)?
            .id
            .clone();
        let job = self.jobs.get_mut(&id).expect("id taken from the map");
        job.state = JobState::Running;
        Some(job.clone())
    }

    /// Raises progress of a running job; lower values are ignored.
    pub fn progress(&mut self, id: &str, p: f64) -> Result<JobRecord, QueueError> {
        let job = self.jobs.get_mut(id).ok_or_else(|| QueueError::UnknownJob(id.to_string()))?;
        if job.state != JobState::Running {
            return Err(QueueError::IllegalTransition { id: id.to_string(), from: job.state, to: JobState::Running });
        }
        if p.is_finite() {
            job.progress = job.progress.max(p.clamp(0.0, 1.0));
        }
        Ok(job.clone())
    }

    pub fn finish(&mut self, id: &str, outcome: Result<serde_json::Value, String>) -> Result<JobRecord, QueueError> {
        let job = self.jobs.get_mut(id).ok_or_else(|| QueueError::UnknownJob(id.to_string()))?;
        let to = if outcome.is_ok() { JobState::Done } else { JobState::Failed };
        if !job.state.can_become(to) {
            return Err(QueueError::IllegalTransition { id: id.to_string(), from: job.state, to });
        }
        job.state = to;
        match outcome {
            Ok(v) => {
                job.progress = 1.0;
                job.result = Some(v);
            }
            Err(e) => job.error = Some(e),
        }
        Ok(job.clone())
    }
}

pub struct JobQueue {
    core: Mutex<QueueCore>,
    dir: std::path::PathBuf,
    wake: Notify,
}

impl JobQueue {
    /// Loads every job under `<root>/jobs`, applying [`QueueCore::recover`].
    pub fn open(store: &Store) -> ApiResult<Self> {
        let dir = store.jobs_dir();
        let mut records = Vec::new();
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let rec: JobRecord = serde_json::from_slice(&std::fs::read(&path)?)
                .map_err(|e| ApiError::internal(format!("job file {}: {e}", path.display())))?;
            records.push(rec);
        }
        let (core, changed) = QueueCore::recover(records);
        let queue = Self { core: Mutex::new(core), dir, wake: Notify::new() };
        for id in changed {
            let rec = queue.get(&id)?;
            queue.persist(&rec)?;
        }
        Ok(queue)
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, QueueCore> {
        self.core.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn persist(&self, rec: &JobRecord) -> ApiResult<()> {
        let mut bytes = serde_json::to_vec_pretty(rec)?;
        bytes.push(b'\n');
        write_atomic(&self.dir.join(format!("{}.json", rec.id)), &bytes)
    }

    pub fn submit(&self, project_id: &str, kind: JobKind, payload: serde_json::Value) -> ApiResult<JobRecord> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let rec = {
            let mut core = self.lock();
            let rec = core.submit(id, project_id.to_string(), kind, payload);
            self.persist(&rec)?;
            rec
        };
        self.wake.notify_one();
        Ok(rec)
    }

    pub fn get(&self, id: &str) -> ApiResult<JobRecord> {
        if !is_safe_id(id) {
            return Err(ApiError::not_found("job", id));
        }
        self.lock().get(id).cloned().ok_or_else(|| ApiError::not_found("job", id))
    }

    pub fn for_project(&self, project_id: &str) -> Vec<JobRecord> {
        let mut jobs: Vec<JobRecord> = self.lock().all().filter(|j| j.project_id == project_id).cloned().collect();
        jobs.sort_by_key(|j| j.seq);
        jobs
    }

    pub fn claim(&self) -> ApiResult<Option<JobRecord>> {
        let mut core = self.lock();
        let job = core.claim();
        if let Some(j) = &job {
            self.persist(j)?;
        }
        Ok(job)
    }

    pub fn progress(&self, id: &str, p: f64) -> ApiResult<()> {
        let mut core = self.lock();
        let before = core.get(id).map(|j| j.progress);
        let rec = core.progress(id, p)?;
        if before != Some(rec.progress) {
            self.persist(&rec)?;
        }
        Ok(())
    }

    pub fn finish(&self, id: &str, outcome: Result<serde_json::Value, String>) -> ApiResult<JobRecord> {
        let rec = {
            let mut core = self.lock();
            let rec = core.finish(id, outcome)?;
            self.persist(&rec)?;
            rec
        };
        self.wake.notify_one();
        Ok(rec)
    }

    /// Resolves after the next submit or finish.
    pub async fn notified(&self) {
        self.wake.notified().await
    }
}
