//! Training jobs on a bounded worker pool. Each job trains on a snapshot of
//! its project's samples taken when the job is submitted.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use gestureforge_core::embedder::EmbeddingModel;
use gestureforge_core::gesture::{LabeledFrame, TrainSpec};
use serde::Serialize;
use tokio::sync::Semaphore;

use crate::error::ApiError;
use crate::store::{now_ms, Store};
use crate::training::{train_kshot, HeadOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct JobProgress {
    pub epoch: usize,
    pub epochs: usize,
    pub loss: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct JobError {
    pub code: String,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Job {
    pub id: String,
    pub project_id: String,
    pub spec: TrainSpec,
    pub head: HeadOptions,
    pub state: JobState,
    pub progress: JobProgress,
    pub result_model_id: Option<String>,
    pub error: Option<JobError>,
    pub created_ms: i64,
    pub finished_ms: Option<i64>,
}

pub struct JobManager {
    jobs: Mutex<HashMap<String, Job>>,
    slots: Arc<Semaphore>,
}

impl JobManager {
    pub fn new(max_concurrent: usize) -> Self {
        JobManager {
            jobs: Mutex::new(HashMap::new()),
            slots: Arc::new(Semaphore::new(max_concurrent.max(1))),
        }
    }

    pub fn get(&self, id: &str) -> Result<Job, ApiError> {
        self.jobs
            .lock()
            .map_err(|_| ApiError::internal("job table poisoned"))?
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("job", id))
    }

    pub fn list(&self) -> Result<Vec<Job>, ApiError> {
        let mut jobs: Vec<Job> = self
            .jobs
            .lock()
            .map_err(|_| ApiError::internal("job table poisoned"))?
            .values()
            .cloned()
            .collect();
        jobs.sort_by(|a, b| (a.created_ms, &a.id).cmp(&(b.created_ms, &b.id)));
        Ok(jobs)
    }

    fn update(&self, id: &str, f: impl FnOnce(&mut Job)) {
        if let Ok(mut jobs) = self.jobs.lock() {
            if let Some(job) = jobs.get_mut(id) {
                f(job);
            }
        }
    }

    /// Queues a job; it runs once a worker slot is free.
    pub fn submit(
        self: &Arc<Self>,
        store: Arc<Store>,
        embedder: Arc<EmbeddingModel>,
        project_id: String,
        spec: TrainSpec,
        head: HeadOptions,
    ) -> Result<Job, ApiError> {
        spec.validate()?;
        let (classes, samples) = store.snapshot(&project_id)?;
        let job = Job {
            id: uuid::Uuid::new_v4().simple().to_string(),
            project_id: project_id.clone(),
            spec: spec.clone(),
            head: head.clone(),
            state: JobState::Queued,
            progress: JobProgress {
                epoch: 0,
                epochs: spec.epochs,
                loss: None,
            },
            result_model_id: None,
            error: None,
            created_ms: now_ms(),
            finished_ms: None,
        };
        self.jobs
            .lock()
            .map_err(|_| ApiError::internal("job table poisoned"))?
            .insert(job.id.clone(), job.clone());
        let manager = Arc::clone(self);
        let job_id = job.id.clone();
        tokio::spawn(async move {
            let Ok(_permit) = manager.slots.clone().acquire_owned().await else {
                return;
            };
            manager.update(&job_id, |j| j.state = JobState::Running);
            let worker = Arc::clone(&manager);
            let id = job_id.clone();
            let outcome = tokio::task::spawn_blocking(move || {
                run_job(
                    &worker,
                    &store,
                    &embedder,
                    &id,
                    &project_id,
                    &classes,
                    &samples,
                    &spec,
                    &head,
                )
            })
            .await;
            let finished = now_ms();
            match outcome {
                Ok(Ok(model_id)) => manager.update(&job_id, |j| {
                    j.state = JobState::Succeeded;
                    j.result_model_id = Some(model_id);
                    j.finished_ms = Some(finished);
                }),
                Ok(Err(e)) => manager.update(&job_id, |j| {
                    j.state = JobState::Failed;
                    j.error = Some(JobError {
                        code: e.code,
                        reason: e.reason,
                    });
                    j.finished_ms = Some(finished);
                }),
                Err(join) => manager.update(&job_id, |j| {
                    j.state = JobState::Failed;
                    j.error = Some(JobError {
                        code: "internal_error".into(),
                        reason: join.to_string(),
                    });
                    j.finished_ms = Some(finished);
                }),
            }
        });
        Ok(job)
    }
}

#[allow(clippy::too_many_arguments)]
fn run_job(
    manager: &JobManager,
    store: &Store,
    embedder: &EmbeddingModel,
    job_id: &str,
    project_id: &str,
    classes: &[String],
    samples: &[LabeledFrame],
    spec: &TrainSpec,
    head: &HeadOptions,
) -> Result<String, ApiError> {
    let model = train_kshot(embedder, samples, Some(classes), spec, head, &mut |p| {
        manager.update(job_id, |j| {
            j.progress = JobProgress {
                epoch: p.epoch,
                epochs: p.epochs,
                loss: Some(p.mean_loss),
            }
        })
    })?;
    let meta = store.add_model(model, Some(project_id.to_string()), Some(job_id.to_string()))?;
    Ok(meta.id)
}
