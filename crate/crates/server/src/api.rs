//! HTTP API over the session store.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;
use tower_http::services::{ServeDir, ServeFile};
use tsexplain_core::whatif::Space;

use crate::config::SessionConfig;
use crate::error::ServerError;
use crate::explore::{CounterfactualRequest, SessionView, WhatIfRequest};
use crate::jobs::JobQueue;
use crate::store::{SessionStore, Status};

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<SessionStore>,
    pub jobs: JobQueue,
}

/// Error body `{code, message}` with the status implied by the error.
pub struct ApiError(ServerError);

impl From<ServerError> for ApiError {
    fn from(e: ServerError) -> Self {
        ApiError(e)
    }
}

impl ApiError {
    fn status(&self) -> StatusCode {
        use tsexplain_core::Error as E;
        match &self.0 {
            ServerError::NotFound(_) | ServerError::UnknownRoute(_) => StatusCode::NOT_FOUND,
            ServerError::NotDone { .. } | ServerError::InvalidTransition { .. } => StatusCode::CONFLICT,
            ServerError::FileNotFound(_) | ServerError::InvalidConfig(_) | ServerError::InvalidRequest(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            ServerError::Core(e) => match e {
                E::ManifestParse(_) | E::NonFinite(_) | E::NonFiniteLoss { .. } | E::MissingContext(_) => {
                    StatusCode::INTERNAL_SERVER_ERROR
                }
                _ => StatusCode::UNPROCESSABLE_ENTITY,
            },
            ServerError::CorruptManifest { .. }
            | ServerError::Io { .. }
            | ServerError::Artifact { .. }
            | ServerError::Internal(_) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() {
            tracing::error!("{}", self.0);
        }
        (status, Json(json!({"code": self.0.code(), "message": self.0.to_string()}))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ServerError::InvalidRequest(e.to_string()).into())
}

fn parse_index(raw: &str) -> Result<usize, ApiError> {
    raw.parse()
        .map_err(|_| ServerError::InvalidRequest(format!("sample index {raw:?} is not a non-negative integer")).into())
}

/// Engine calls are CPU-bound; keep them off the async workers.
async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ServerError> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map(Json).map_err(ApiError),
        Err(e) => Err(ServerError::Internal(format!("request handler panicked: {e}")).into()),
    }
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> Result<(StatusCode, Json<serde_json::Value>), ApiError> {
    let config: SessionConfig = SessionConfig::from_json(std::str::from_utf8(&body).unwrap_or_default())?;
    let store = state.store.clone();
    let Json(id) = blocking(move || store.create(config)).await?;
    state.jobs.enqueue(id.clone());
    Ok((StatusCode::CREATED, Json(json!({ "id": id }))))
}

#[derive(Serialize)]
struct SessionSummary {
    id: String,
    created_unix: u64,
    status: Status,
    partial: bool,
}

async fn list_sessions(State(state): State<AppState>) -> ApiResult<Vec<SessionSummary>> {
    blocking(move || {
        Ok(state
            .store
            .list()?
            .into_iter()
            .map(|m| SessionSummary {
                id: m.id,
                created_unix: m.created_unix,
                status: m.status,
                partial: m.partial,
            })
            .collect())
    })
    .await
}

async fn session_status(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<serde_json::Value> {
    blocking(move || {
        let m = state.store.load(&id)?;
        Ok(json!({"id": m.id, "status": m.status, "partial": m.partial, "artifacts": m.artifacts}))
    })
    .await
}

async fn delete_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    let Json(()) = blocking(move || state.store.delete(&id)).await?;
    Ok(StatusCode::NO_CONTENT)
}

/// Runs `f` against the opened view of a done session.
async fn with_view<T, F>(state: AppState, id: String, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&SessionView<'_>) -> Result<T, ServerError> + Send + 'static,
{
    blocking(move || f(&SessionView::open(&state.store, &id)?)).await
}

async fn ranking(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    match with_view(state, id, |v| v.ranking()).await {
        Ok(r) => r.into_response(),
        Err(e) => e.into_response(),
    }
}

async fn projections(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    match with_view(state, id, |v| v.projections()).await {
        Ok(r) => r.into_response(),
        Err(e) => e.into_response(),
    }
}

async fn sample(State(state): State<AppState>, Path((id, idx)): Path<(String, String)>) -> Response {
    let index = match parse_index(&idx) {
        Ok(i) => i,
        Err(e) => return e.into_response(),
    };
    match with_view(state, id, move |v| v.sample(index)).await {
        Ok(r) => r.into_response(),
        Err(e) => e.into_response(),
    }
}

async fn neighbors(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(query): Query<HashMap<String, String>>,
) -> Response {
    let parsed = (|| -> Result<(usize, Space, usize), ApiError> {
        let index = parse_index(query.get("idx").ok_or_else(|| ServerError::InvalidRequest("missing idx".into()))?)?;
        let space = match query.get("space") {
            Some(s) => s.parse().map_err(ServerError::from)?,
            None => Space::Euclidean,
        };
        let k = match query.get("k") {
            Some(k) => k
                .parse()
                .map_err(|_| ServerError::InvalidRequest(format!("k {k:?} is not a positive integer")))?,
            None => 5,
        };
        Ok((index, space, k))
    })();
    let (index, space, k) = match parsed {
        Ok(p) => p,
        Err(e) => return e.into_response(),
    };
    match with_view(state, id, move |v| {
        Ok(json!({"idx": index, "space": space, "k": k, "neighbors": v.neighbors(index, space, k)?}))
    })
    .await
    {
        Ok(r) => r.into_response(),
        Err(e) => e.into_response(),
    }
}

async fn whatif(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Response {
    let request: WhatIfRequest = match parse_body(&body) {
        Ok(r) => r,
        Err(e) => return e.into_response(),
    };
    match with_view(state, id, move |v| v.whatif(&request)).await {
        Ok(r) => r.into_response(),
        Err(e) => e.into_response(),
    }
}

async fn counterfactual(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Response {
    let request: CounterfactualRequest = match parse_body(&body) {
        Ok(r) => r,
        Err(e) => return e.into_response(),
    };
    match with_view(state, id, move |v| v.counterfactual(&request)).await {
        Ok(r) => r.into_response(),
        Err(e) => e.into_response(),
    }
}

async fn api_not_found(uri: axum::http::Uri) -> ApiError {
    ServerError::UnknownRoute(uri.path().to_string()).into()
}

/// API routes, plus the UI's static assets when `assets` is given
/// (unknown non-API paths fall back to `index.html`).
pub fn router(state: AppState, assets: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", axum::routing::delete(delete_session))
        .route("/sessions/{id}/status", get(session_status))
        .route("/sessions/{id}/ranking", get(ranking))
        .route("/sessions/{id}/projections", get(projections))
        .route("/sessions/{id}/samples/{idx}", get(sample))
        .route("/sessions/{id}/neighbors", get(neighbors))
        .route("/sessions/{id}/whatif", post(whatif))
        .route("/sessions/{id}/counterfactual", post(counterfactual))
        .fallback(api_not_found)
        .with_state(state);
    let app = Router::new().nest("/api", api);
    match assets {
        Some(dir) => {
            let index = dir.join("index.html");
            app.fallback_service(ServeDir::new(dir).fallback(ServeFile::new(index)))
        }
        None => app,
    }
}
