//! Worklist HTTP API and server-sent event stream.
//!
//! | method | path | body | success |
//! |---|---|---|---|
//! | GET | `/worklist` | | [`WorklistView`](crate::dto::WorklistView) |
//! | POST | `/worklist/{id}/complete` | `{"outputValues": {..}}` | `{txId, blockNumber}` |
//! | POST | `/models` | model document (JSON, or TOML with a `toml` content type) | `{modelId, txId, blockNumber}` |
//! | POST | `/cases` | `{"modelId": .., "initialData": {..}}` | `{caseId, txId, blockNumber}` |
//! | GET | `/cases`, `/cases/{id}` | | [`CaseView`](crate::dto::CaseView) |
//! | GET | `/chain/status` | | [`ChainStatus`](crate::dto::ChainStatus) |
//! | GET | `/events` | | `text/event-stream` |
//!
//! Errors are `{"code": .., "message": ..}` with a 4xx/5xx status. Worklist,
//! case and model routes answer 503 `RECOVERING` until the node is ready.
//! With a token configured every route needs `Authorization: Bearer <token>`;
//! `/events` also accepts `?token=` because browsers cannot set headers on
//! an `EventSource`.

use std::convert::Infallible;
use std::time::Duration;

use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use ledgerflow::crypto::Digest;
use ledgerflow::node::{NodeError, NodeStatus};
use ledgerflow::workflow::{EngineError, ModelDocument, RejectReason, WorkItemId, WorkflowModel};
use serde::Deserialize;
use serde_json::json;
use tokio::sync::broadcast;

use crate::dto;
use crate::runtime::{Command, JsonData, NodeHandle, Submitted, TxOutcome};

#[derive(Clone)]
pub struct ApiState {
    pub handle: NodeHandle,
    pub token: Option<String>,
    /// How long a mutating request waits for its block.
    pub submit_timeout: Duration,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    extra: Option<serde_json::Value>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, code, message: message.into(), extra: None }
    }

    fn unavailable() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "UNAVAILABLE", "node event loop stopped")
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "code": self.code, "message": self.message });
        if let Some(serde_json::Value::Object(extra)) = self.extra {
            body.as_object_mut().unwrap().extend(extra);
        }
        (self.status, Json(body)).into_response()
    }
}

impl From<NodeError> for ApiError {
    fn from(e: NodeError) -> Self {
        use StatusCode as S;
        let (status, code) = match &e {
            NodeError::Engine(EngineError::UnknownWorkItem(_)) => (S::NOT_FOUND, "WORK_ITEM_NOT_FOUND"),
            NodeError::Engine(EngineError::WorkItemStale(_)) => (S::CONFLICT, "WORK_ITEM_STALE"),
            NodeError::Engine(EngineError::WorkItemLocked(_)) => (S::CONFLICT, "WORK_ITEM_LOCKED"),
            NodeError::Engine(EngineError::TypeMismatch(_)) => (S::UNPROCESSABLE_ENTITY, "TYPE_MISMATCH"),
            NodeError::Engine(EngineError::UnknownModel(_)) => (S::NOT_FOUND, "UNKNOWN_MODEL"),
            NodeError::Engine(EngineError::MalformedModel(_)) => (S::UNPROCESSABLE_ENTITY, "MALFORMED_MODEL"),
            NodeError::DuplicateModel(_) => (S::CONFLICT, "DUPLICATE_MODEL"),
            NodeError::Recovering => (S::SERVICE_UNAVAILABLE, "RECOVERING"),
            NodeError::Halted(_) => (S::SERVICE_UNAVAILABLE, "HALTED"),
            NodeError::ChainCorrupt(_) | NodeError::NoRecoverySource => (S::INTERNAL_SERVER_ERROR, "INTERNAL"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

pub fn reason_code(r: &RejectReason) -> &'static str {
    match r {
        RejectReason::DuplicateTransaction => "DUPLICATE_TRANSACTION",
        RejectReason::BadSignature => "BAD_SIGNATURE",
        RejectReason::UnknownModel(_) => "UNKNOWN_MODEL",
        RejectReason::DuplicateModel(_) => "DUPLICATE_MODEL",
        RejectReason::MalformedModel(_) => "MALFORMED_MODEL",
        RejectReason::ModelMismatch => "MODEL_MISMATCH",
        RejectReason::NotInitialMarking => "NOT_INITIAL_MARKING",
        RejectReason::NotReachable => "NOT_REACHABLE",
        RejectReason::ConstraintViolated(_) => "CONSTRAINT_VIOLATED",
        RejectReason::DataChangeNotAllowed(_) => "DATA_CHANGE_NOT_ALLOWED",
        RejectReason::DataTypeMismatch(_) => "TYPE_MISMATCH",
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: ApiState) -> Router {
    let gated = Router::new()
        .route("/worklist", get(get_worklist))
        .route("/worklist/{id}/complete", post(complete))
        .route("/models", post(install_model))
        .route("/cases", get(list_cases).post(launch_case))
        .route("/cases/{id}", get(get_case))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_ready));
    Router::new()
        .merge(gated)
        .route("/chain/status", get(chain_status))
        .route("/events", get(events))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}

#[derive(Deserialize)]
struct TokenQuery {
    token: Option<String>,
}

async fn require_token(
    State(st): State<ApiState>,
    Query(q): Query<TokenQuery>,
    headers: HeaderMap,
    req: Request,
    next: Next,
) -> Response {
    if let Some(expected) = &st.token {
        let bearer = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        let ok = bearer == Some(expected.as_str()) || (req.uri().path() == "/events" && q.token.as_deref() == Some(expected));
        if !ok {
            return ApiError::new(StatusCode::UNAUTHORIZED, "UNAUTHORIZED", "missing or wrong bearer token").into_response();
        }
    }
    next.run(req).await
}

async fn require_ready(State(st): State<ApiState>, req: Request, next: Next) -> Response {
    match st.handle.read(|n| n.status().clone()).await {
        Some(NodeStatus::Running) => next.run(req).await,
        Some(NodeStatus::Recovering) => {
            ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "RECOVERING", "node is recovering").into_response()
        }
        Some(NodeStatus::Halted(r)) => ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "HALTED", r).into_response(),
        None => ApiError::unavailable().into_response(),
    }
}

async fn get_worklist(State(st): State<ApiState>) -> ApiResult<Json<dto::WorklistView>> {
    st.handle.read(dto::worklist).await.map(Json).ok_or_else(ApiError::unavailable)
}

async fn chain_status(State(st): State<ApiState>) -> ApiResult<Json<dto::ChainStatus>> {
    st.handle.read(dto::chain_status).await.map(Json).ok_or_else(ApiError::unavailable)
}

async fn list_cases(State(st): State<ApiState>) -> ApiResult<Json<Vec<dto::CaseView>>> {
    st.handle
        .read(|n| n.engine().cases().values().map(dto::case).collect())
        .await
        .map(Json)
        .ok_or_else(ApiError::unavailable)
}

async fn get_case(State(st): State<ApiState>, Path(id): Path<String>) -> ApiResult<Json<dto::CaseView>> {
    let not_found = || ApiError::new(StatusCode::NOT_FOUND, "CASE_NOT_FOUND", format!("no case {id}"));
    let digest: Digest = id.parse().map_err(|_| not_found())?;
    st.handle
        .read(move |n| n.engine().case(&digest).map(dto::case))
        .await
        .ok_or_else(ApiError::unavailable)?
        .map(Json)
        .ok_or_else(not_found)
}

/// Wait for the block holding the submission, or its rejection.
async fn settle(st: &ApiState, sub: Submitted) -> ApiResult<(String, u64)> {
    let tx_id = sub.tx_id.to_hex();
    match tokio::time::timeout(st.submit_timeout, sub.outcome).await {
        Ok(Ok(TxOutcome::Committed { block_number })) => Ok((tx_id, block_number)),
        Ok(Ok(TxOutcome::Rejected(reason))) => {
            let code = reason_code(&reason);
            let status = match reason {
                RejectReason::DataTypeMismatch(_)
                | RejectReason::MalformedModel(_)
                | RejectReason::ConstraintViolated(_)
                | RejectReason::DataChangeNotAllowed(_) => StatusCode::UNPROCESSABLE_ENTITY,
                _ => StatusCode::CONFLICT,
            };
            let top = match reason {
                RejectReason::DuplicateModel(_) => "DUPLICATE_MODEL",
                _ => "TRANSACTION_REJECTED",
            };
            let mut err = ApiError::new(status, top, reason.to_string());
            err.extra = Some(json!({ "reason": code, "txId": tx_id, "refreshWorklist": true }));
            Err(err)
        }
        Ok(Ok(TxOutcome::Divergent)) => {
            Err(ApiError::new(StatusCode::BAD_GATEWAY, "DIVERGENT_REPLIES", "ordering replicas returned conflicting results"))
        }
        Ok(Err(_)) => Err(ApiError::unavailable()),
        Err(_) => {
            let mut err = ApiError::new(StatusCode::GATEWAY_TIMEOUT, "TIMEOUT", "no block within the submit timeout");
            err.extra = Some(json!({ "txId": tx_id }));
            Err(err)
        }
    }
}

#[derive(Deserialize, Default)]
#[serde(rename_all = "camelCase")]
struct CompleteBody {
    #[serde(default)]
    output_values: JsonData,
}

async fn complete(
    State(st): State<ApiState>,
    Path(id): Path<String>,
    body: Option<Json<CompleteBody>>,
) -> ApiResult<Json<serde_json::Value>> {
    let not_found = || ApiError::new(StatusCode::NOT_FOUND, "WORK_ITEM_NOT_FOUND", format!("no work item {id}"));
    let item = WorkItemId(u64::from_str_radix(&id, 16).map_err(|_| not_found())?);
    let outputs = body.map(|b| b.0.output_values).unwrap_or_default();
    let sub = st
        .handle
        .command(|reply| Command::CompleteWorkItem { id: item, outputs, reply })
        .await
        .ok_or_else(ApiError::unavailable)??;
    let (tx_id, block) = settle(&st, sub).await?;
    Ok(Json(json!({ "workItemId": id, "txId": tx_id, "blockNumber": block })))
}

async fn install_model(State(st): State<ApiState>, headers: HeaderMap, body: String) -> ApiResult<Json<serde_json::Value>> {
    let is_toml = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.contains("toml"));
    let malformed = |m: String| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "MALFORMED_MODEL", m);
    let model = if is_toml {
        WorkflowModel::from_toml(&body).map_err(|e| malformed(e.to_string()))?
    } else {
        let doc: ModelDocument = serde_json::from_str(&body).map_err(|e| malformed(e.to_string()))?;
        doc.into_model().map_err(|e| malformed(e.to_string()))?
    };
    let model_id = model.model_id.clone();
    let sub = st
        .handle
        .command(|reply| Command::InstallModel { model, reply })
        .await
        .ok_or_else(ApiError::unavailable)??;
    let (tx_id, block) = settle(&st, sub).await?;
    Ok(Json(json!({ "modelId": model_id, "txId": tx_id, "blockNumber": block })))
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct LaunchBody {
    model_id: String,
    #[serde(default)]
    initial_data: JsonData,
}

async fn launch_case(State(st): State<ApiState>, Json(body): Json<LaunchBody>) -> ApiResult<Json<serde_json::Value>> {
    let (case, sub) = st
        .handle
        .command(|reply| Command::LaunchCase { model_id: body.model_id, data: body.initial_data, reply })
        .await
        .ok_or_else(ApiError::unavailable)??;
    let (tx_id, block) = settle(&st, sub).await?;
    Ok(Json(json!({ "caseId": case.to_hex(), "txId": tx_id, "blockNumber": block })))
}

async fn events(State(st): State<ApiState>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = st.handle.subscribe();
    let stream = futures::stream::unfold(rx, |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(ev) => {
                    let data = serde_json::to_string(&ev).unwrap_or_default();
                    return Some((Ok(Event::default().event(ev.kind).data(data)), rx));
                }
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    tracing::warn!(skipped = n, "event subscriber lagged");
                }
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    Sse::new(stream).keep_alive(KeepAlive::default())
}
