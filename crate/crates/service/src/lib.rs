//! HTTP front end for live conversations.
//!
//! | method | path | body | success |
//! |---|---|---|---|
//! | POST | `/sessions` | `{user?, seed_attribute?}` | 201 [`WireSession`] |
//! | POST | `/sessions/{token}/feedback` | `{response, target}` | 200 [`WireSession`] |
//! | GET | `/sessions/{token}` | | 200 [`WireSession`] |
//! | GET | `/metrics` | | 200 [`MetricsSnapshot`] |
//!
//! Errors are `{"error": {"code", "message"}}` with codes
//! `invalid_body` (400), `session_not_found` (404), `target_mismatch`
//! (409), `session_finished` (410), `model_unavailable` (503) and
//! `internal` (500).

mod state;
mod store;
pub mod wire;

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use convrec::config::RunConfig;
use convrec::eval::EvalError;
use convrec::session::SessionError;
use serde::de::DeserializeOwned;
use thiserror::Error;

pub use state::{transcript_dir, Model, Service};
pub use store::TranscriptStore;
pub use wire::{CreateRequest, ErrorBody, ErrorDetail, FeedbackRequest, MetricsSnapshot, Target, WireSession, WireTurn};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("invalid request body: {0}")]
    InvalidBody(String),
    #[error("no session with token {0}")]
    NotFound(String),
    #[error("feedback does not match the pending prompt {expected}")]
    TargetMismatch { expected: serde_json::Value },
    #[error("session {0} has finished")]
    Finished(String),
    #[error("models are not loaded: {0}")]
    ModelUnavailable(String),
    #[error("transcript store: {0}")]
    Store(String),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("server: {0}")]
    Server(#[from] std::io::Error),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::InvalidBody(_) => StatusCode::BAD_REQUEST,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::TargetMismatch { .. } => StatusCode::CONFLICT,
            ServiceError::Finished(_) => StatusCode::GONE,
            ServiceError::ModelUnavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::InvalidBody(_) => "invalid_body",
            ServiceError::NotFound(_) => "session_not_found",
            ServiceError::TargetMismatch { .. } => "target_mismatch",
            ServiceError::Finished(_) => "session_finished",
            ServiceError::ModelUnavailable(_) => "model_unavailable",
            _ => "internal",
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() {
            log::error!("{self}");
        }
        let body = ErrorBody { error: ErrorDetail { code: self.code().to_string(), message: self.to_string() } };
        (status, Json(body)).into_response()
    }
}

type Shared = Arc<Service>;

fn parse<T: DeserializeOwned + Default>(body: &Bytes) -> Result<T, ServiceError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ServiceError::InvalidBody(e.to_string()))
}

/// Turn work runs FM updates, so keep it off the async workers.
async fn blocking<T, F>(svc: Shared, f: F) -> Result<T, ServiceError>
where
    T: Send + 'static,
    F: FnOnce(&Service) -> Result<T, ServiceError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&svc)).await.map_err(|e| ServiceError::Store(format!("worker failed: {e}")))?
}

async fn create(State(svc): State<Shared>, body: Bytes) -> Result<(StatusCode, Json<WireSession>), ServiceError> {
    let req: CreateRequest = parse(&body)?;
    let view = blocking(svc, move |s| s.create(req)).await?;
    Ok((StatusCode::CREATED, Json(view)))
}

async fn feedback(State(svc): State<Shared>, Path(token): Path<String>, body: Bytes) -> Result<Json<WireSession>, ServiceError> {
    let req: FeedbackRequest = serde_json::from_slice(&body).map_err(|e| ServiceError::InvalidBody(e.to_string()))?;
    Ok(Json(blocking(svc, move |s| s.feedback(&token, req)).await?))
}

async fn show(State(svc): State<Shared>, Path(token): Path<String>) -> Result<Json<WireSession>, ServiceError> {
    Ok(Json(svc.get(&token)?))
}

async fn metrics(State(svc): State<Shared>) -> Json<MetricsSnapshot> {
    Json(svc.metrics())
}

pub fn router(svc: Arc<Service>) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{token}", get(show))
        .route("/sessions/{token}/feedback", post(feedback))
        .route("/metrics", get(metrics))
        .with_state(svc)
}

/// Load models, restore stored sessions and serve until the process is
/// stopped. Idle sessions are aborted by a background sweep.
pub async fn serve(cfg: &RunConfig) -> Result<(), ServiceError> {
    let svc = Arc::new(Service::open(cfg)?);
    let sweeper = svc.clone();
    let period = (svc.timeout() / 4).clamp(std::time::Duration::from_secs(1), std::time::Duration::from_secs(60));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            let s = sweeper.clone();
            match tokio::task::spawn_blocking(move || s.sweep(std::time::Instant::now())).await {
                Ok(Ok(n)) if n > 0 => log::info!("aborted {n} idle sessions"),
                Ok(Err(e)) => log::error!("sweep: {e}"),
                _ => {}
            }
        }
    });
    let listener = tokio::net::TcpListener::bind(&cfg.service.addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(svc)).await?;
    Ok(())
}
