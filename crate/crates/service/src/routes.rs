use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use triadic_core::evaluation::curve_to_csv;
use triadic_core::selection::BatchComposition;
use triadic_core::{Answer, Dataset, GlobalParams, HitBatch, ModelKind, Verdict, HIT_SIZE};

use crate::error::ApiError;
use crate::state::{AppState, JobStatus, TrainRequest};

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/config", get(config))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/answers", post(submit_answers))
        .route("/admin/train", post(train))
        .route("/admin/train/{job_id}", get(train_status))
        .route("/admin/learning-curve", get(learning_curve))
        .route("/model/embedding", get(embedding))
        .with_state(state)
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    payload.map(|Json(v)| v).map_err(|e| ApiError::Invalid(e.body_text()))
}

/// What a worker sees of an object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectCard {
    pub id: String,
    pub name: String,
    pub description: String,
    pub image_ref: Option<String>,
}

/// One question as shown to a worker: no role, cluster or expected answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionCard {
    pub index: usize,
    pub a: ObjectCard,
    pub b: ObjectCard,
    pub c: ObjectCard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchView {
    pub batch_id: String,
    pub questions: Vec<QuestionCard>,
}

fn card(ds: &Dataset, id: &str) -> Result<ObjectCard, ApiError> {
    let r = ds.record(ds.index_of(id)?);
    Ok(ObjectCard { id: r.id.clone(), name: r.name.clone(), description: r.description.clone(), image_ref: r.image_ref.clone() })
}

fn batch_view(ds: &Dataset, batch: &HitBatch) -> Result<BatchView, ApiError> {
    let questions = triadic_core::selection::worker_view(batch)
        .into_iter()
        .map(|q| Ok(QuestionCard { index: q.index, a: card(ds, &q.a)?, b: card(ds, &q.b)?, c: card(ds, &q.c)? }))
        .collect::<Result<_, ApiError>>()?;
    Ok(BatchView { batch_id: batch.batch_id.clone(), questions })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigView {
    pub dataset_id: String,
    pub model_flag: ModelKind,
    pub allow_neither: bool,
    pub hit_size: usize,
    pub composition: BatchComposition,
}

async fn config(State(state): State<AppState>) -> Json<ConfigView> {
    Json(ConfigView {
        dataset_id: state.config().dataset_id.clone(),
        model_flag: state.config().model,
        allow_neither: state.allow_neither(),
        hit_size: HIT_SIZE,
        composition: state.composition(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub worker_id: String,
    pub dataset_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub worker_id: String,
    pub allow_neither: bool,
    pub batch: BatchView,
}

async fn create_session(
    State(state): State<AppState>,
    payload: Result<Json<CreateSession>, JsonRejection>,
) -> Result<(StatusCode, Json<SessionCreated>), ApiError> {
    let req = body(payload)?;
    let state2 = state.clone();
    let session = tokio::task::spawn_blocking(move || state2.create_session(&req.worker_id, &req.dataset_id))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    let batch = batch_view(state.dataset(), session.pending.as_ref().expect("new sessions hold a batch"))?;
    Ok((
        StatusCode::CREATED,
        Json(SessionCreated { session_id: session.session_id, worker_id: session.worker_id, allow_neither: state.allow_neither(), batch }),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitAnswers {
    pub answers: Vec<Answer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitOutcome {
    pub verdict: Verdict,
    pub accepted_batches: usize,
    pub rejected_batches: usize,
    pub next_batch: BatchView,
    /// Set when this submission started an automatic training job.
    pub training_job: Option<String>,
}

async fn submit_answers(
    State(state): State<AppState>,
    Path(id): Path<String>,
    payload: Result<Json<SubmitAnswers>, JsonRejection>,
) -> Result<Json<SubmitOutcome>, ApiError> {
    let req = body(payload)?;
    let state2 = state.clone();
    // selection and log writes are synchronous work
    let sub = tokio::task::spawn_blocking(move || state2.submit_answers(&id, req.answers))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(Json(SubmitOutcome {
        verdict: sub.verdict,
        accepted_batches: sub.accepted,
        rejected_batches: sub.rejected,
        next_batch: batch_view(state.dataset(), &sub.next)?,
        training_job: sub.training_job,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStarted {
    pub job_id: String,
}

async fn train(
    State(state): State<AppState>,
    payload: Option<Json<TrainRequest>>,
) -> Result<(StatusCode, Json<TrainStarted>), ApiError> {
    let req = payload.map(|Json(r)| r).unwrap_or_default();
    let job_id = state.start_training(req)?;
    Ok((StatusCode::ACCEPTED, Json(TrainStarted { job_id })))
}

async fn train_status(State(state): State<AppState>, Path(job_id): Path<String>) -> Result<Json<JobStatus>, ApiError> {
    state.job(&job_id).map(Json).ok_or_else(|| ApiError::NotFound(format!("unknown job `{job_id}`")))
}

async fn learning_curve(State(state): State<AppState>) -> Result<impl IntoResponse, ApiError> {
    state.snapshot().ok_or(ApiError::NoSnapshot)?;
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], curve_to_csv(&state.learning_curve())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedObject {
    pub id: String,
    pub name: String,
    pub description: String,
    pub image_ref: Option<String>,
    pub cluster: String,
    pub coords: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingView {
    pub snapshot_version: u64,
    pub model_flag: ModelKind,
    pub dim: usize,
    pub params: GlobalParams,
    pub observations_used: usize,
    pub objects: Vec<EmbeddedObject>,
}

async fn embedding(State(state): State<AppState>) -> Result<Json<EmbeddingView>, ApiError> {
    let snap = state.snapshot().ok_or(ApiError::NoSnapshot)?;
    let ds = state.dataset();
    let objects = ds
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| EmbeddedObject {
            id: r.id.clone(),
            name: r.name.clone(),
            description: r.description.clone(),
            image_ref: r.image_ref.clone(),
            cluster: r.cluster.clone(),
            coords: snap.model.embedding.row(i).to_vec(),
        })
        .collect();
    Ok(Json(EmbeddingView {
        snapshot_version: snap.version,
        model_flag: snap.model.kind,
        dim: snap.model.dim(),
        params: snap.model.params,
        observations_used: snap.observations_used,
        objects,
    }))
}
