//! Shared service state: sessions, the observation log, training jobs and the
//! serving model snapshot.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use chrono::Utc;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use triadic_core::evaluation::{build_learning_curve, modes_for, preference_only, Checkpointed, LearningCurvePoint};
use triadic_core::optimizer::{self, OptimizerConfig};
use triadic_core::selection::{self, BatchComposition, SelectionStrategy, StrategyKind};
use triadic_core::store::{self, Checkpoint, ObservationLog};
use triadic_core::{Answer, Dataset, HitBatch, Model, ModelKind, PriorConfig, Role, Verdict};

use crate::config::ServiceConfig;
use crate::error::{ApiError, ServiceError};

pub const LOG_FILE: &str = "observations.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// A fitted model being served. Replaced as a whole, never mutated.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub version: u64,
    pub model: Model,
    pub observations_used: usize,
}

#[derive(Debug, Clone)]
pub struct Session {
    pub session_id: String,
    pub worker_id: String,
    pub dataset_id: String,
    pub pending: Option<HitBatch>,
    pub accepted: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: String,
    pub status: JobState,
    pub model_flag: ModelKind,
    pub dim: usize,
    pub loss: Option<f64>,
    pub iterations: Option<usize>,
    pub snapshot_version: Option<u64>,
    pub error: Option<String>,
}

/// Optional settings for one training job.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRequest {
    pub model_flag: Option<ModelKind>,
    pub dim: Option<usize>,
    pub optimizer: Option<OptimizerOverrides>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerOverrides {
    pub max_iters: Option<usize>,
    pub rel_tol: Option<f64>,
    pub restarts: Option<usize>,
    pub seed: Option<u64>,
    pub include_test: Option<bool>,
}

#[derive(Debug, Default)]
struct Counters {
    sessions: u64,
    batches: u64,
    jobs: u64,
    accepted_since_train: usize,
}

struct Inner {
    config: ServiceConfig,
    dataset: Dataset,
    composition: BatchComposition,
    log: Mutex<ObservationLog>,
    sessions: Mutex<HashMap<String, Session>>,
    snapshot: RwLock<Option<Arc<Snapshot>>>,
    jobs: Mutex<BTreeMap<String, JobStatus>>,
    training: AtomicBool,
    rng: Mutex<ChaCha8Rng>,
    counters: Mutex<Counters>,
    curve: Mutex<Vec<LearningCurvePoint>>,
}

/// Cheap to clone; all clones share one state.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    // a panicked holder cannot leave these structures half-updated
    m.lock().unwrap_or_else(|p| p.into_inner())
}

/// Outcome of submitting a batch.
#[derive(Debug, Clone)]
pub struct Submission {
    pub verdict: Verdict,
    pub accepted: usize,
    pub rejected: usize,
    pub next: HitBatch,
    pub training_job: Option<String>,
}

impl AppState {
    /// Loads the dataset, replays the observation log and restores the last
    /// checkpoint from `data_dir` when present.
    pub fn new(config: ServiceConfig) -> Result<Self, ServiceError> {
        config.validate()?;
        let dataset = store::load_dataset(&config.dataset_path)?;
        fs::create_dir_all(&config.data_dir)?;
        let log = ObservationLog::open(config.data_dir.join(LOG_FILE))?;
        let checkpoint_path = config.data_dir.join(CHECKPOINT_FILE);
        let snapshot = if checkpoint_path.exists() {
            let cp = store::load_checkpoint(&checkpoint_path)?;
            if !cp.object_ids.iter().map(String::as_str).eq(dataset.ids()) {
                return Err(ServiceError::Config(format!(
                    "{} was trained on a different dataset",
                    checkpoint_path.display()
                )));
            }
            Some(Arc::new(Snapshot { version: 1, model: cp.to_model()?, observations_used: cp.observation_count }))
        } else {
            None
        };
        let composition = config.composition();
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            inner: Arc::new(Inner {
                composition,
                dataset,
                log: Mutex::new(log),
                sessions: Mutex::new(HashMap::new()),
                snapshot: RwLock::new(snapshot),
                jobs: Mutex::new(BTreeMap::new()),
                training: AtomicBool::new(false),
                rng: Mutex::new(rng),
                counters: Mutex::new(Counters::default()),
                curve: Mutex::new(Vec::new()),
                config,
            }),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.inner.config
    }

    pub fn dataset(&self) -> &Dataset {
        &self.inner.dataset
    }

    pub fn composition(&self) -> BatchComposition {
        self.inner.composition
    }

    pub fn allow_neither(&self) -> bool {
        self.inner.config.model.allows_neither()
    }

    pub fn snapshot(&self) -> Option<Arc<Snapshot>> {
        self.inner.snapshot.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    fn install_snapshot(&self, model: Model, observations_used: usize) -> u64 {
        let mut slot = self.inner.snapshot.write().unwrap_or_else(|p| p.into_inner());
        let version = slot.as_ref().map_or(1, |s| s.version + 1);
        *slot = Some(Arc::new(Snapshot { version, model, observations_used }));
        version
    }

    pub fn observation_count(&self) -> usize {
        lock(&self.inner.log).len()
    }

    pub fn learning_curve(&self) -> Vec<LearningCurvePoint> {
        lock(&self.inner.curve).clone()
    }

    pub fn session(&self, id: &str) -> Option<Session> {
        lock(&self.inner.sessions).get(id).cloned()
    }

    fn next_batch(&self, session_id: &str, worker_id: &str) -> Result<HitBatch, ApiError> {
        let batch_id = {
            let mut c = lock(&self.inner.counters);
            c.batches += 1;
            format!("{session_id}-b{:06}", c.batches)
        };
        let snapshot = self.snapshot();
        // before the first fit there is nothing to be uncertain about
        let (model, strategy) = match &snapshot {
            Some(s) => (Some(&s.model), self.inner.config.strategy),
            None => (None, SelectionStrategy::new(StrategyKind::Random)),
        };
        let mut rng = lock(&self.inner.rng);
        Ok(selection::assemble_hit(batch_id, worker_id, &self.inner.dataset, model, self.inner.composition, &strategy, &mut *rng)?)
    }

    pub fn create_session(&self, worker_id: &str, dataset_id: &str) -> Result<Session, ApiError> {
        if worker_id.trim().is_empty() {
            return Err(ApiError::Invalid("worker_id must not be empty".into()));
        }
        if dataset_id != self.inner.config.dataset_id {
            return Err(ApiError::NotFound(format!("unknown dataset `{dataset_id}`")));
        }
        let session_id = {
            let mut c = lock(&self.inner.counters);
            c.sessions += 1;
            format!("s{:06}", c.sessions)
        };
        let batch = self.next_batch(&session_id, worker_id)?;
        let session = Session {
            session_id: session_id.clone(),
            worker_id: worker_id.to_owned(),
            dataset_id: dataset_id.to_owned(),
            pending: Some(batch),
            accepted: 0,
            rejected: 0,
        };
        lock(&self.inner.sessions).insert(session_id, session.clone());
        Ok(session)
    }

    /// Judges the pending batch, stores accepted answers and hands out the next batch.
    pub fn submit_answers(&self, session_id: &str, answers: Vec<Answer>) -> Result<Submission, ApiError> {
        if !self.allow_neither() && answers.contains(&Answer::Neither) {
            return Err(ApiError::Invalid("NEITHER is not offered by the two-answer interface".into()));
        }
        let (worker_id, mut batch) = {
            let mut sessions = lock(&self.inner.sessions);
            let session = sessions
                .get_mut(session_id)
                .ok_or_else(|| ApiError::NotFound(format!("unknown session `{session_id}`")))?;
            let batch = session
                .pending
                .as_ref()
                .ok_or_else(|| ApiError::NoPendingBatch(format!("session `{session_id}` has no pending batch")))?;
            if answers.len() != batch.questions().len() {
                return Err(ApiError::Invalid(format!(
                    "expected {} answers, got {}",
                    batch.questions().len(),
                    answers.len()
                )));
            }
            (session.worker_id.clone(), session.pending.take().expect("checked above"))
        };
        let judged = batch
            .record_answers(answers)
            .map_err(ApiError::from)
            .and_then(|_| selection::judge_batch(&mut batch).map_err(ApiError::from));
        let verdict = match judged {
            Ok(v) => v,
            Err(e) => {
                // put the untouched batch back so the worker can retry
                if let Some(s) = lock(&self.inner.sessions).get_mut(session_id) {
                    s.pending.get_or_insert(batch);
                }
                return Err(e);
            }
        };
        if verdict == Verdict::Accepted {
            lock(&self.inner.log).append_batch(&batch, Utc::now())?;
        }
        let next = self.next_batch(session_id, &worker_id)?;
        let (accepted, rejected) = {
            let mut sessions = lock(&self.inner.sessions);
            let s = sessions.get_mut(session_id).expect("sessions are never removed");
            match verdict {
                Verdict::Accepted => s.accepted += 1,
                _ => s.rejected += 1,
            }
            s.pending = Some(next.clone());
            (s.accepted, s.rejected)
        };
        let training_job = if verdict == Verdict::Accepted { self.maybe_auto_train() } else { None };
        Ok(Submission { verdict, accepted, rejected, next, training_job })
    }

    fn maybe_auto_train(&self) -> Option<String> {
        let every = self.inner.config.auto_train_every;
        if every == 0 {
            return None;
        }
        let due = {
            let mut c = lock(&self.inner.counters);
            c.accepted_since_train += 1;
            c.accepted_since_train >= every
        };
        if !due {
            return None;
        }
        let job = self.start_training(TrainRequest::default()).ok()?;
        lock(&self.inner.counters).accepted_since_train = 0;
        Some(job)
    }

    /// Starts a background fit over the whole log. One job at a time.
    pub fn start_training(&self, request: TrainRequest) -> Result<String, ApiError> {
        let kind = request.model_flag.unwrap_or(self.inner.config.model);
        let dim = request.dim.unwrap_or(self.inner.config.dim);
        if dim == 0 {
            return Err(ApiError::Invalid("dim must be at least 1".into()));
        }
        let mut cfg = self.inner.config.optimizer;
        if let Some(o) = &request.optimizer {
            cfg.max_iters = o.max_iters.unwrap_or(cfg.max_iters);
            cfg.rel_tol = o.rel_tol.unwrap_or(cfg.rel_tol);
            cfg.restarts = o.restarts.unwrap_or(cfg.restarts);
            cfg.include_test = o.include_test.unwrap_or(cfg.include_test);
            cfg.seed = o.seed.unwrap_or(cfg.seed);
        }
        cfg.validate()?;
        let observations = lock(&self.inner.log).observations();
        let train = optimizer::training_observations(&observations, cfg.include_test);
        if train.is_empty() {
            return Err(ApiError::Invalid("no accepted observations to train on".into()));
        }
        if kind == ModelKind::TwoAnswer && train.iter().any(|o| o.answer == Answer::Neither) {
            return Err(ApiError::Invalid("the log holds NEITHER answers; a two-answer fit cannot use them".into()));
        }
        if self.inner.training.compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire).is_err() {
            return Err(ApiError::Conflict("a training job is already running".into()));
        }
        let job_id = {
            let mut c = lock(&self.inner.counters);
            c.jobs += 1;
            if request.optimizer.as_ref().and_then(|o| o.seed).is_none() {
                cfg.seed = self.inner.config.seed.wrapping_add(c.jobs);
            }
            format!("job-{:04}", c.jobs)
        };
        lock(&self.inner.jobs).insert(
            job_id.clone(),
            JobStatus {
                job_id: job_id.clone(),
                status: JobState::Running,
                model_flag: kind,
                dim,
                loss: None,
                iterations: None,
                snapshot_version: None,
                error: None,
            },
        );
        let state = self.clone();
        let id = job_id.clone();
        tokio::task::spawn_blocking(move || {
            let outcome = state.run_training(kind, dim, &cfg, &observations);
            let mut jobs = lock(&state.inner.jobs);
            let job = jobs.get_mut(&id).expect("job registered before spawn");
            match outcome {
                Ok((loss, iterations, version)) => {
                    job.status = JobState::Completed;
                    job.loss = Some(loss);
                    job.iterations = Some(iterations);
                    job.snapshot_version = Some(version);
                }
                Err(e) => {
                    job.status = JobState::Failed;
                    job.error = Some(e.to_string());
                }
            }
            drop(jobs);
            state.inner.training.store(false, Ordering::Release);
        });
        Ok(job_id)
    }

    fn run_training(
        &self,
        kind: ModelKind,
        dim: usize,
        cfg: &OptimizerConfig,
        observations: &[triadic_core::Observation],
    ) -> Result<(f64, usize, u64), ServiceError> {
        let ds = &self.inner.dataset;
        let fitted = optimizer::fit(observations, ds, dim, kind, cfg, &PriorConfig::default())?;
        let used = optimizer::training_observations(observations, cfg.include_test).len();
        let checkpoint = Checkpoint::from_model(&fitted.model, ds, *cfg, used);
        store::save_checkpoint(self.checkpoint_path(), &checkpoint)?;
        let test: Vec<_> = observations
            .iter()
            .filter(|o| o.role == Role::Test)
            .cloned()
            .collect();
        if !preference_only(&test).is_empty() {
            let points = build_learning_curve(
                &[Checkpointed { observations_used: used, model: &fitted.model }],
                ds,
                &test,
                modes_for(kind),
            )?;
            lock(&self.inner.curve).extend(points);
        }
        let version = self.install_snapshot(fitted.model, used);
        Ok((fitted.loss.total, fitted.iterations, version))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.inner.config.data_dir.join(CHECKPOINT_FILE)
    }

    pub fn job(&self, job_id: &str) -> Option<JobStatus> {
        lock(&self.inner.jobs).get(job_id).cloned()
    }
}
