//! HTTP routes. Reads take a snapshot of the shared state; only
//! `POST /labels` and `POST /control/*` mutate it.

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use protolab_core::dal::Answer;
use protolab_core::data::imaging::{overlay_heatmap, png_bytes};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use crate::state::{RequestStatus, Shared, Submit};

/// Body of `POST /labels`. Exactly one of `label` or `skip: true`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSubmission {
    pub request_id: String,
    #[serde(default)]
    pub label: Option<usize>,
    #[serde(default)]
    pub skip: bool,
}

#[derive(Debug, Serialize)]
struct SubmitReply {
    request_id: String,
    status: RequestStatus,
    changed: bool,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

/// Builds the router. `console` is an optional directory with the built
/// labeling console, served for every path the API does not claim.
pub fn router(shared: Arc<Shared>, console: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/state", get(state))
        .route("/queries", get(queries))
        .route("/explanations/{instance}", get(explanation))
        .route("/explanations/{instance}/heatmap/{prototype}", get(heatmap))
        .route("/images/{instance}", get(image))
        .route("/metrics", get(metrics))
        .route("/labels", post(labels))
        .route("/control/pause", post(pause))
        .route("/control/resume", post(resume))
        .with_state(shared);
    match console {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

async fn state(State(s): State<Arc<Shared>>) -> Response {
    Json(s.state()).into_response()
}

async fn queries(State(s): State<Arc<Shared>>) -> Response {
    Json(s.pending()).into_response()
}

async fn metrics(State(s): State<Arc<Shared>>) -> Response {
    Json(s.records()).into_response()
}

async fn explanation(State(s): State<Arc<Shared>>, Path(instance): Path<usize>) -> Response {
    match s.explanation(instance) {
        Some(e) => Json(e).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("no explanation for instance {instance}")),
    }
}

async fn heatmap(State(s): State<Arc<Shared>>, Path((instance, prototype)): Path<(usize, usize)>) -> Response {
    let Some(e) = s.explanation(instance) else {
        return error(StatusCode::NOT_FOUND, format!("no explanation for instance {instance}"));
    };
    let Some(j) = e.prototypes.iter().position(|p| p.prototype_id == prototype) else {
        return error(StatusCode::NOT_FOUND, format!("no prototype {prototype}"));
    };
    let Some(inst) = s.data().get(instance) else {
        return error(StatusCode::NOT_FOUND, format!("unknown instance {instance}"));
    };
    let size = inst.image.shape()[1];
    match overlay_heatmap(&inst.image, &e.upsampled_map(j, size)).and_then(|t| png_bytes(&t)) {
        Ok(bytes) => png(bytes),
        Err(err) => error(StatusCode::INTERNAL_SERVER_ERROR, err.to_string()),
    }
}

async fn image(State(s): State<Arc<Shared>>, Path(instance): Path<usize>) -> Response {
    let Some(inst) = s.data().get(instance) else {
        return error(StatusCode::NOT_FOUND, format!("unknown instance {instance}"));
    };
    match png_bytes(&inst.image) {
        Ok(bytes) => png(bytes),
        Err(err) => error(StatusCode::INTERNAL_SERVER_ERROR, err.to_string()),
    }
}

async fn labels(State(s): State<Arc<Shared>>, body: Result<Json<LabelSubmission>, JsonRejection>) -> Response {
    let Json(sub) = match body {
        Ok(b) => b,
        Err(rej) => return error(StatusCode::BAD_REQUEST, rej.body_text()),
    };
    let answer = match (sub.label, sub.skip) {
        (Some(y), false) => Answer::Label(y),
        (None, true) => Answer::Skipped,
        _ => return error(StatusCode::BAD_REQUEST, "give exactly one of `label` or `skip: true`"),
    };
    // the submission runs on a blocking thread because it fsyncs the journal
    let id = sub.request_id.clone();
    let shared = s.clone();
    let outcome = match tokio::task::spawn_blocking(move || shared.submit(&id, answer)).await {
        Ok(o) => o,
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    };
    let reply = |changed| {
        let status = s.request(&sub.request_id).map(|r| r.status).expect("request exists");
        Json(SubmitReply {
            request_id: sub.request_id.clone(),
            status,
            changed,
        })
        .into_response()
    };
    match outcome {
        Submit::Accepted => reply(true),
        Submit::Unchanged => reply(false),
        Submit::UnknownRequest => error(StatusCode::NOT_FOUND, format!("unknown request {}", sub.request_id)),
        Submit::Conflict(status) => error(
            StatusCode::CONFLICT,
            format!("request {} is no longer pending ({status:?})", sub.request_id),
        ),
        Submit::InvalidLabel => error(StatusCode::BAD_REQUEST, "label is not a valid class"),
        Submit::Journal(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

async fn pause(State(s): State<Arc<Shared>>) -> Response {
    s.set_paused(true);
    Json(s.state()).into_response()
}

async fn resume(State(s): State<Arc<Shared>>) -> Response {
    s.set_paused(false);
    Json(s.state()).into_response()
}
