//! REST surface of the rating desk.

use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use musicform_core::stats::write_ratings;
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

use crate::clips::{qualification_audio, ClipStore, SAMPLE_RATE};
use crate::desk::{DeskError, RaterStatus, RatingDesk, TaskKind};

pub struct AppState {
    pub desk: Mutex<RatingDesk>,
    pub clips: Arc<dyn ClipStore>,
    /// Length of synthesized qualification clips.
    pub qualification_seconds: f32,
}

impl AppState {
    pub fn new(desk: RatingDesk, clips: Arc<dyn ClipStore>) -> Self {
        Self {
            desk: Mutex::new(desk),
            clips,
            qualification_seconds: 60.0,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.into(),
                message: message.into(),
            },
        }
    }
}

impl From<DeskError> for ApiError {
    fn from(e: DeskError) -> Self {
        let status = match &e {
            DeskError::UnknownClip(_) | DeskError::EmptyBatch | DeskError::ScoreOutOfRange(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            DeskError::UnknownBatch(_) => StatusCode::NOT_FOUND,
            DeskError::RaterBlocked { .. } => StatusCode::FORBIDDEN,
            DeskError::DuplicateSubmission(_) | DeskError::NotAssigned { .. } => StatusCode::CONFLICT,
            DeskError::InvalidId(_) => StatusCode::BAD_REQUEST,
            DeskError::Log(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.code(), e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateBatch {
    pub clips: Vec<String>,
    pub raters_needed: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BatchCreated {
    pub batch_id: String,
}

/// What a rater sees. The instructed score stays server-side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskView {
    pub task_id: String,
    pub clip_id: String,
    pub kind: TaskKind,
    pub audio_url: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NextResponse {
    pub task: Option<TaskView>,
    pub rater_status: RaterStatus,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScoreBody {
    pub task_id: String,
    pub score: i64,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Percent-encode a clip id as a single path segment.
pub fn encode_clip_id(id: &str) -> String {
    id.replace('/', "%2F")
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/batches", post(create_batch))
        .route("/v1/batches/{id}/progress", get(progress))
        .route("/v1/raters/{id}/next", get(next_task))
        .route("/v1/raters/{id}/scores", post(submit_score))
        .route("/v1/clips/{id}/audio", get(clip_audio))
        .route("/v1/ratings", get(ratings_csv))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

fn lock(state: &AppState) -> std::sync::MutexGuard<'_, RatingDesk> {
    state.desk.lock().unwrap_or_else(std::sync::PoisonError::into_inner)
}

async fn create_batch(
    State(state): State<Arc<AppState>>,
    body: Result<Json<CreateBatch>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<BatchCreated>)> {
    let Json(req) = body?;
    let clips = state.clips.clone();
    let batch_id = lock(&state).enqueue_batch(req.clips, req.raters_needed, |c| clips.exists(c))?;
    Ok((StatusCode::CREATED, Json(BatchCreated { batch_id })))
}

async fn progress(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(lock(&state).progress(&id)?))
}

async fn next_task(State(state): State<Arc<AppState>>, Path(rater): Path<String>) -> ApiResult<Json<NextResponse>> {
    let mut desk = lock(&state);
    let task = desk.next_task(&rater)?;
    Ok(Json(NextResponse {
        task: task.map(|t| TaskView {
            audio_url: format!("/v1/clips/{}/audio", encode_clip_id(&t.clip_id)),
            task_id: t.task_id,
            clip_id: t.clip_id,
            kind: t.kind,
        }),
        rater_status: desk.rater_status(&rater),
    }))
}

async fn submit_score(
    State(state): State<Arc<AppState>>,
    Path(rater): Path<String>,
    body: Result<Json<ScoreBody>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let Json(req) = body?;
    Ok(Json(lock(&state).submit_score(&rater, &req.task_id, req.score, now())?))
}

async fn clip_audio(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let kind = lock(&state).qualification_kind(&id);
    let bytes = match kind {
        Some(kind) => musicform_core::synth::wav_bytes(&qualification_audio(kind, state.qualification_seconds), SAMPLE_RATE)
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "storage_error", e.to_string()))?,
        None => state
            .clips
            .audio(&id)
            .ok_or_else(|| {
                let e = DeskError::UnknownClip(id.clone());
                ApiError::new(StatusCode::NOT_FOUND, e.code(), e.to_string())
            })?,
    };
    Ok(([(header::CONTENT_TYPE, "audio/wav")], bytes).into_response())
}

async fn ratings_csv(State(state): State<Arc<AppState>>) -> ApiResult<Response> {
    let records = lock(&state).records();
    let mut buf = Vec::new();
    write_ratings(&mut buf, &records)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "storage_error", e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "text/csv")], buf).into_response())
}

/// Serve until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
