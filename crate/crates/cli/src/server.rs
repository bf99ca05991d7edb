//! HTTP+JSON review API.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use anyhow::{Context, Result};
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use cbdt_core::agreement::{Decision, Review};
use cbdt_core::lexicon::DimensionLabel;
use cbdt_core::review::{
    open_store, parse_status_filter, write_snapshot, EventLog, ReviewError, ReviewStore, EVENTS_FILE, SNAPSHOT_FILE,
};
use serde::Deserialize;
use serde_json::json;

pub const REVIEWER_HEADER: &str = "x-reviewer-id";

pub struct Inner {
    pub store: ReviewStore,
    pub log: Option<EventLog>,
}

pub type Shared = Arc<RwLock<Inner>>;

/// State backed by `dir`: the corpus plus its replayed event log, with new
/// events appended to that log.
pub fn open_state(dir: &Path, quorum: usize) -> Result<Shared> {
    let store = open_store(dir, quorum).with_context(|| format!("loading review state from {}", dir.display()))?;
    let log = EventLog::open(&dir.join(EVENTS_FILE))?;
    Ok(Arc::new(RwLock::new(Inner { store, log: Some(log) })))
}

/// State with no event log.
pub fn memory_state(store: ReviewStore) -> Shared {
    Arc::new(RwLock::new(Inner { store, log: None }))
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/api/queue", get(queue))
        .route("/api/records/{id}", get(record))
        .route("/api/records/{id}/reviews", axum::routing::post(post_review))
        .route("/api/agreement", get(agreement))
        .route("/api/export.jsonl", get(export_jsonl))
        .route("/api/export.conll", get(export_conll))
        .with_state(state)
}

fn error(status: StatusCode, msg: impl std::fmt::Display) -> Response {
    (status, Json(json!({ "error": msg.to_string() }))).into_response()
}

#[derive(Deserialize)]
struct QueueParams {
    status: Option<String>,
}

async fn queue(State(state): State<Shared>, Query(p): Query<QueueParams>) -> Response {
    let statuses = match parse_status_filter(p.status.as_deref()) {
        Ok(s) => s,
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    let inner = state.read().unwrap();
    Json(inner.store.queue(&statuses)).into_response()
}

async fn record(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> Response {
    let inner = state.read().unwrap();
    match inner.store.get(&id) {
        Some(item) => Json(item).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("unknown record {id}")),
    }
}

/// Review body. The reviewer may come from the header instead.
#[derive(Deserialize)]
struct ReviewBody {
    reviewer_id: Option<String>,
    decision: Decision,
    #[serde(default)]
    spans: Vec<String>,
    #[serde(default)]
    dimension: Option<DimensionLabel>,
    #[serde(default)]
    note: String,
    version: u64,
}

async fn post_review(
    State(state): State<Shared>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: Result<Json<ReviewBody>, JsonRejection>,
) -> Response {
    let Json(body) = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    let header_id = headers
        .get(REVIEWER_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty());
    let reviewer_id = match (header_id, body.reviewer_id) {
        (Some(h), Some(b)) if h != b => {
            return error(
                StatusCode::BAD_REQUEST,
                format!("{REVIEWER_HEADER} {h:?} differs from body reviewer_id {b:?}"),
            )
        }
        (Some(h), _) => h,
        (None, Some(b)) => b,
        (None, None) => return error(StatusCode::BAD_REQUEST, format!("missing {REVIEWER_HEADER} header")),
    };
    let review = Review {
        record_id: id,
        reviewer_id,
        decision: body.decision,
        spans: body.spans,
        dimension: body.dimension,
        note: body.note,
        version: body.version,
    };

    let mut inner = state.write().unwrap();
    let before = inner.store.get(&review.record_id).cloned();
    match inner.store.submit(review) {
        Ok(out) => {
            if let Some(log) = inner.log.as_mut() {
                if let Err(e) = log.append(&out.events) {
                    if let Some(b) = before {
                        let _ = inner.store.restore(b);
                    }
                    return error(StatusCode::INTERNAL_SERVER_ERROR, format!("review not persisted: {e}"));
                }
            }
            Json(out).into_response()
        }
        Err(ReviewError::NotFound(id)) => error(StatusCode::NOT_FOUND, format!("unknown record {id}")),
        Err(ReviewError::Conflict { reason, current }) => {
            (StatusCode::CONFLICT, Json(json!({ "error": reason, "current": current }))).into_response()
        }
        Err(e @ ReviewError::Invalid(_)) => error(StatusCode::BAD_REQUEST, e),
    }
}

async fn agreement(State(state): State<Shared>) -> Response {
    let inner = state.read().unwrap();
    Json(inner.store.agreement()).into_response()
}

async fn export_jsonl(State(state): State<Shared>) -> Response {
    let body = state.read().unwrap().store.export_jsonl();
    ([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response()
}

async fn export_conll(State(state): State<Shared>) -> Response {
    let body = state.read().unwrap().store.export_conll();
    match body {
        Ok(b) => ([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], b).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

/// Serves until interrupted, then writes a snapshot next to the log.
pub async fn serve(dir: &Path, addr: &str, quorum: usize, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let state = open_state(dir, quorum)?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| crate::user_error(format!("cannot listen on {addr}: {e}")))?;
    writeln!(out, "serving {} on http://{}", dir.display(), listener.local_addr()?)?;
    out.flush()?;
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    let snapshot: PathBuf = dir.join(SNAPSHOT_FILE);
    write_snapshot(&snapshot, &state.read().unwrap().store)?;
    writeln!(err, "wrote {}", snapshot.display())?;
    Ok(())
}
