//! HTTP front end.
//!
//! | route            | body                                   | reply          |
//! |------------------|----------------------------------------|----------------|
//! | `POST /v1/jobs`  | job record plus optional `policy`      | `JobResult`    |
//! | `POST /v1/query` | `{"context": .., "query": ..}`         | `QueryResponse`|
//! | `GET /v1/metrics`| none                                   | counters       |
//! | `GET /healthz`   | none                                   | `ok`           |

use std::net::SocketAddr;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Fallback, Gateway, GatewayError, JobResult, MetricsSnapshot};
use crate::dataset::JobRecord;
use crate::model::{MultiQueryJob, QuerySummaryPair};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyOverrides {
    pub fallback: Option<Fallback>,
    pub max_queries_per_prompt: Option<usize>,
    pub max_single_retries_per_job: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobRequest {
    #[serde(flatten)]
    pub job: JobRecord,
    #[serde(default)]
    pub policy: Option<PolicyOverrides>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryRequest {
    pub context: String,
    pub query: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryResponse {
    #[serde(flatten)]
    pub pair: QuerySummaryPair,
    pub batch_id: u64,
    pub batch_size: usize,
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({"error": self.1}))).into_response()
    }
}

impl From<GatewayError> for ApiError {
    fn from(e: GatewayError) -> Self {
        let status = match e {
            GatewayError::Timeout => StatusCode::GATEWAY_TIMEOUT,
            GatewayError::Backend(_) => StatusCode::BAD_GATEWAY,
            GatewayError::Invalid(_) => StatusCode::BAD_REQUEST,
            GatewayError::Dropped => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

async fn jobs(State(gw): State<Gateway>, Json(req): Json<JobRequest>) -> Result<Json<JobResult>, ApiError> {
    let job_id = req.job.transcript.id.clone();
    let job = MultiQueryJob::try_from(req.job).map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.to_string()))?;
    let mut ctx = gw.context().clone();
    if let Some(p) = req.policy {
        if let Some(f) = p.fallback {
            ctx.policy.fallback = f;
        }
        if let Some(m) = p.max_queries_per_prompt {
            ctx.policy.max_queries_per_prompt = m;
        }
        if p.max_single_retries_per_job.is_some() {
            ctx.policy.max_single_retries_per_job = p.max_single_retries_per_job;
        }
        ctx.policy.validate().map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.to_string()))?;
    }
    Ok(Json(gw.submit_job(&job_id, &job, Some(&ctx)).await))
}

async fn query(State(gw): State<Gateway>, Json(req): Json<QueryRequest>) -> Result<Json<QueryResponse>, ApiError> {
    let a = gw.submit_single(&req.context, &req.query).await?;
    Ok(Json(QueryResponse { pair: a.pair, batch_id: a.batch_id, batch_size: a.batch_size }))
}

async fn metrics(State(gw): State<Gateway>) -> Json<MetricsSnapshot> {
    Json(gw.metrics_snapshot())
}

async fn healthz() -> &'static str {
    "ok"
}

pub fn router(gateway: Gateway) -> Router {
    Router::new()
        .route("/v1/jobs", post(jobs))
        .route("/v1/query", post(query))
        .route("/v1/metrics", get(metrics))
        .route("/healthz", get(healthz))
        .with_state(gateway)
}

/// Serves until ctrl-c.
pub async fn serve(addr: SocketAddr, gateway: Gateway) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "gateway listening");
    axum::serve(listener, router(gateway))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
