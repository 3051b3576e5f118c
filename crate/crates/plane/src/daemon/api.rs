//! HTTP control API. Mutating handlers run their operation on a blocking
//! thread and answer only once the operation's completion record arrives on
//! the IPC socket.

use std::sync::Arc;

use axum::extract::{rejection::JsonRejection, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;

use super::ipc::Pending;
use super::supervisor::{OpResult, Supervisor};
use crate::wire::{CheckpointRequest, FaultRequest, OpResponse, RunRequest};

#[derive(Clone)]
pub struct AppState {
    pub sup: Arc<Supervisor>,
    pub pending: Pending,
}

pub fn router(state: AppState) -> Router {
    let debug = state.sup.config().debug_api;
    let mut r = Router::new()
        .route("/run", post(run))
        .route("/checkpoint", post(checkpoint))
        .route("/status", get(status))
        .route("/metrics", get(metrics));
    if debug {
        r = r
            .route("/fault", post(fault))
            .route("/debug/drop-completion", post(drop_completion));
    }
    r.with_state(state)
}

fn invalid(e: JsonRejection) -> Response {
    (
        StatusCode::UNPROCESSABLE_ENTITY,
        Json(OpResponse::rejected("invalid", e.body_text())),
    )
        .into_response()
}

async fn complete<F>(state: AppState, op: F) -> Response
where
    F: FnOnce(&Supervisor, &str) -> OpResult + Send + 'static,
{
    let op_id = state.sup.next_op_id();
    let done = state.pending.register(&op_id);
    let sup = state.sup.clone();
    let id = op_id.clone();
    let result = match tokio::task::spawn_blocking(move || op(&sup, &id)).await {
        Ok(r) => r,
        Err(e) => {
            state.pending.forget(&op_id);
            return (
                StatusCode::INTERNAL_SERVER_ERROR,
                Json(OpResponse::rejected("internal", e.to_string())),
            )
                .into_response();
        }
    };
    if result.signalled {
        let timeout = state.sup.config().correlation_timeout();
        match tokio::time::timeout(timeout, done).await {
            Ok(Ok(_record)) => {}
            _ => {
                state.pending.forget(&op_id);
                let mut body = result.body;
                body.outcome = "failed".into();
                body.error = Some(format!("no completion record for {op_id} within {timeout:?}"));
                body.error_kind = Some("completion_timeout".into());
                return (StatusCode::INTERNAL_SERVER_ERROR, Json(body)).into_response();
            }
        }
    } else {
        state.pending.forget(&op_id);
    }
    let code = StatusCode::from_u16(result.http_status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (code, Json(result.body)).into_response()
}

async fn run(State(state): State<AppState>, body: Result<Json<RunRequest>, JsonRejection>) -> Response {
    let req = match body {
        Ok(Json(r)) => r,
        Err(e) => return invalid(e),
    };
    complete(state, move |sup, id| sup.run_op(id, &req)).await
}

async fn checkpoint(
    State(state): State<AppState>,
    body: Result<Json<CheckpointRequest>, JsonRejection>,
) -> Response {
    let req = match body {
        Ok(Json(r)) => r,
        Err(e) => return invalid(e),
    };
    complete(state, move |sup, id| sup.checkpoint_op(id, &req)).await
}

async fn status(State(state): State<AppState>) -> Response {
    Json(state.sup.status()).into_response()
}

async fn metrics(State(state): State<AppState>) -> Response {
    (
        [(axum::http::header::CONTENT_TYPE, "text/plain; version=0.0.4")],
        state.sup.metrics_text(),
    )
        .into_response()
}

async fn fault(State(state): State<AppState>, body: Result<Json<FaultRequest>, JsonRejection>) -> Response {
    let req = match body {
        Ok(Json(r)) => r,
        Err(e) => return invalid(e),
    };
    let sup = state.sup.clone();
    match tokio::task::spawn_blocking(move || sup.inject_exit(req.exit_code)).await {
        Ok(Ok(())) => (StatusCode::ACCEPTED, Json(json!({"injected": req.exit_code}))).into_response(),
        Ok(Err((code, msg))) => (
            StatusCode::from_u16(code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
            Json(json!({"error": msg})),
        )
            .into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({"error": e.to_string()}))).into_response(),
    }
}

async fn drop_completion(State(state): State<AppState>) -> Response {
    state.sup.drop_next_completion();
    (StatusCode::ACCEPTED, Json(json!({"drop_next_completion": true}))).into_response()
}
