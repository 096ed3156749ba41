use std::collections::BTreeMap;
use std::future::Future;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::extract::rejection::QueryRejection;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use codealign::jsonl::read_jsonl_path;
use codealign::pipeline::DecisionRecord;
use codealign::uncertainty::DeferralPolicy;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;
use tokio::net::TcpListener;

use crate::item::Status;
use crate::queue::{ReviewQueue, Verdict, DEFAULT_PAGE_SIZE, UNMAPPABLE};
use crate::ReviewError;

type Shared = Arc<ReviewQueue>;

impl IntoResponse for ReviewError {
    fn into_response(self) -> Response {
        let status = match &self {
            ReviewError::NotFound(_) => StatusCode::NOT_FOUND,
            ReviewError::AlreadyAdjudicated(_) | ReviewError::DuplicateQueue(_) => StatusCode::CONFLICT,
            ReviewError::InvalidCode { .. } | ReviewError::InvalidRequest(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = json!({ "error": self.kind(), "message": self.to_string() });
        (status, Json(body)).into_response()
    }
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ReviewError> {
    serde_json::from_slice(body).map_err(|e| ReviewError::InvalidRequest(format!("body: {e}")))
}

/// Runs a mutation off the async workers; journal appends fsync.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ReviewError> + Send + 'static,
) -> Result<T, ReviewError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ReviewError::Io(format!("worker: {e}")))?
}

pub fn router(queue: Shared) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/queue", get(list_queue))
        .route("/items/{record_id}", get(get_item))
        .route("/items/{record_id}/adjudicate", post(adjudicate))
        .route("/items/{record_id}/skip", post(skip))
        .route("/enqueue", post(enqueue))
        .route("/export", post(export))
        .with_state(queue)
}

async fn health(State(q): State<Shared>) -> Json<serde_json::Value> {
    let counts = q.counts();
    Json(json!({ "status": "ok", "counts": counts }))
}

async fn list_queue(
    State(q): State<Shared>,
    params: Result<Query<BTreeMap<String, String>>, QueryRejection>,
) -> Result<Response, ReviewError> {
    let Query(params) = params.map_err(|e| ReviewError::InvalidRequest(e.body_text()))?;
    let number = |key: &str, default: usize| -> Result<usize, ReviewError> {
        match params.get(key).map(|s| s.trim()).filter(|s| !s.is_empty()) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| ReviewError::InvalidRequest(format!("{key} must be a positive integer"))),
        }
    };
    let status = match params.get("status").map(|s| s.trim()).filter(|s| !s.is_empty()) {
        None => None,
        Some(s) => Some(s.parse::<Status>().map_err(ReviewError::InvalidRequest)?),
    };
    let page = q.list(status, number("page", 1)?, number("page_size", DEFAULT_PAGE_SIZE)?)?;
    Ok(Json(page).into_response())
}

async fn get_item(State(q): State<Shared>, Path(id): Path<String>) -> Result<Response, ReviewError> {
    Ok(Json(q.get(&id)?).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AdjudicateBody {
    #[serde(default)]
    code: Option<String>,
    #[serde(default)]
    unmappable: bool,
    #[serde(default)]
    reviewer: Option<String>,
}

impl AdjudicateBody {
    fn verdict(self) -> Result<(Verdict, Option<String>), ReviewError> {
        let code = self.code.map(|c| c.trim().to_string()).filter(|c| !c.is_empty());
        let verdict = match (code, self.unmappable) {
            (Some(_), true) => {
                return Err(ReviewError::InvalidRequest(
                    "give either `code` or `unmappable`, not both".into(),
                ))
            }
            (Some(c), false) if c.eq_ignore_ascii_case(UNMAPPABLE) => Verdict::Unmappable,
            (Some(c), false) => Verdict::Code(c),
            (None, true) => Verdict::Unmappable,
            (None, false) => {
                return Err(ReviewError::InvalidRequest(
                    "`code` or `\"unmappable\": true` is required".into(),
                ))
            }
        };
        Ok((verdict, self.reviewer))
    }
}

async fn adjudicate(
    State(q): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ReviewError> {
    let (verdict, reviewer) = parse_body::<AdjudicateBody>(&body)?.verdict()?;
    let item = blocking(move || q.adjudicate(&id, verdict, reviewer)).await?;
    Ok(Json(item).into_response())
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SkipBody {
    #[serde(default)]
    reviewer: Option<String>,
}

async fn skip(State(q): State<Shared>, Path(id): Path<String>, body: Bytes) -> Result<Response, ReviewError> {
    let SkipBody { reviewer } = if body.iter().all(u8::is_ascii_whitespace) {
        SkipBody::default()
    } else {
        parse_body(&body)?
    };
    let item = blocking(move || q.skip(&id, reviewer)).await?;
    Ok(Json(item).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EnqueueBody {
    #[serde(default)]
    path: Option<String>,
    #[serde(default)]
    records: Option<Vec<DecisionRecord>>,
    #[serde(default)]
    policy: Option<DeferralPolicy>,
}

async fn enqueue(State(q): State<Shared>, body: Bytes) -> Result<Response, ReviewError> {
    let body: EnqueueBody = parse_body(&body)?;
    let summary = blocking(move || {
        let records = match (body.path, body.records) {
            (Some(path), None) => read_jsonl_path(&path)
                .map_err(|e| ReviewError::InvalidRequest(format!("{path}: {e}")))?,
            (None, Some(records)) => records,
            _ => {
                return Err(ReviewError::InvalidRequest(
                    "give exactly one of `path` or `records`".into(),
                ))
            }
        };
        q.enqueue(records, body.policy.as_ref())
    })
    .await?;
    Ok(Json(summary).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExportBody {
    path: String,
}

async fn export(State(q): State<Shared>, body: Bytes) -> Result<Response, ReviewError> {
    let ExportBody { path } = parse_body(&body)?;
    if path.trim().is_empty() {
        return Err(ReviewError::InvalidRequest("`path` is empty".into()));
    }
    let reply_path = path.clone();
    let n = blocking(move || q.export_to(&path)).await?;
    Ok(Json(json!({ "path": reply_path, "records": n })).into_response())
}

/// Binds `addr`, turning an occupied port into a readable error.
pub async fn bind(addr: &str) -> Result<TcpListener, ReviewError> {
    TcpListener::bind(addr).await.map_err(|e| ReviewError::Bind {
        addr: addr.to_string(),
        message: if e.kind() == std::io::ErrorKind::AddrInUse {
            "address already in use (is another review service running?)".to_string()
        } else {
            e.to_string()
        },
    })
}

/// Serves the API on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    queue: Shared,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ReviewError> {
    axum::serve(listener, router(queue))
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(|e| ReviewError::Io(e.to_string()))
}
