//! HTTP API over an [`Index`].
//!
//! - `POST /v1/search` `{"query", "top_k", "delta_highlight"?, "delta_cluster"?}`
//! - `GET /v1/health`
//! - `POST /v1/index` with a JSONL corpus body

use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use concept_search::index::{read_jsonl, Index, IngestStats, ProviderFingerprint, SearchOptions, SearchResponse};
use concept_search::query::{DELTA_CLUSTER, DELTA_HIGHLIGHT};
use concept_search::Error;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchRequest {
    pub query: String,
    pub top_k: usize,
    #[serde(default)]
    pub delta_highlight: Option<f64>,
    #[serde(default)]
    pub delta_cluster: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub entries: usize,
    pub provider: ProviderFingerprint,
}

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Domain(_)
            | Error::Contract(_)
            | Error::EmptyInput(_)
            | Error::DuplicateIds(_)
            | Error::Format { .. }
            | Error::Json(_) => StatusCode::BAD_REQUEST,
            Error::Transport(_) | Error::MalformedResponse(_) | Error::DimensionMismatch { .. } => {
                StatusCode::BAD_GATEWAY
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

pub fn router(index: Arc<Index>) -> Router {
    Router::new()
        .route("/v1/search", post(search))
        .route("/v1/health", get(health))
        .route("/v1/index", post(ingest))
        .with_state(index)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> concept_search::Result<T> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

async fn search(State(index): State<Arc<Index>>, Json(req): Json<SearchRequest>) -> ApiResult<SearchResponse> {
    let opts = SearchOptions {
        top_k: req.top_k,
        delta_highlight: req.delta_highlight.unwrap_or(DELTA_HIGHLIGHT),
        delta_cluster: req.delta_cluster.unwrap_or(DELTA_CLUSTER),
    };
    let resp = blocking(move || index.search(&req.query, &opts)).await?;
    Ok(Json(resp))
}

async fn health(State(index): State<Arc<Index>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        entries: index.len(),
        provider: index.engine().fingerprint(),
    })
}

async fn ingest(State(index): State<Arc<Index>>, body: String) -> ApiResult<IngestStats> {
    let stats = blocking(move || {
        let items = read_jsonl(body.as_bytes())?;
        index.ingest(&items)
    })
    .await?;
    Ok(Json(stats))
}

/// Serves until ctrl-c.
pub async fn serve(index: Arc<Index>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(index))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
