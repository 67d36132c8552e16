//! The TES HTTP surface: five JSON endpoints over the store and worker.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, RawQuery, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::model::{Task, TaskSpec, TaskState, TaskView};
use crate::store::{ListFilter, StoreError};
use crate::worker::Worker;

pub const TES_VERSION: &str = "1.1.0";
pub const API_PREFIX: &str = "/ga4gh/tes/v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceType {
    pub group: String,
    pub artifact: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceInfo {
    pub id: String,
    pub name: String,
    pub description: String,
    #[serde(rename = "type")]
    pub service_type: ServiceType,
    /// Storage URL schemes this instance can stage.
    pub storage: Vec<String>,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub message: String,
    pub status: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreateTaskResponse {
    pub id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ListTasksResponse {
    pub tasks: Vec<Task>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_page_token: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// Serve under `/ga4gh/tes/v1` instead of at the root.
    pub use_prefix: bool,
    /// Require `Authorization: Bearer <token>` when set.
    pub bearer_token: Option<String>,
    pub service_id: String,
    pub service_name: String,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            use_prefix: false,
            bearer_token: None,
            service_id: "org.ga4gh.tes.local".to_string(),
            service_name: "tes-server".to_string(),
        }
    }
}

struct AppState {
    worker: Arc<Worker>,
    config: ServerConfig,
}

/// An error response: HTTP status plus an [`ErrorBody`] mirroring it.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            message: self.message,
            status: self.status.as_u16(),
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(err: StoreError) -> Self {
        let status = match &err {
            StoreError::NotFound(_) => StatusCode::NOT_FOUND,
            StoreError::ValidationFailed(_) | StoreError::InvalidPageToken => {
                StatusCode::BAD_REQUEST
            }
            StoreError::StorageUnavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
        };
        ApiError::new(status, err.to_string())
    }
}

/// Build the router for a running worker.
pub fn router(worker: Arc<Worker>, config: ServerConfig) -> Router {
    let use_prefix = config.use_prefix;
    let auth = config.bearer_token.is_some();
    let state = Arc::new(AppState { worker, config });

    let api = Router::new()
        .route("/service-info", get(service_info))
        .route("/tasks", get(list_tasks).post(create_task))
        .route("/tasks/{id}", get(get_task).post(cancel_task))
        .method_not_allowed_fallback(method_not_allowed);
    let api = if use_prefix {
        Router::new().nest(API_PREFIX, api)
    } else {
        api
    };
    let api = api.fallback(not_found);
    let api = if auth {
        api.layer(middleware::from_fn_with_state(state.clone(), require_bearer))
    } else {
        api
    };
    api.with_state(state)
}

async fn require_bearer(
    State(state): State<Arc<AppState>>,
    request: Request,
    next: Next,
) -> Response {
    let expected = state.config.bearer_token.as_deref().unwrap_or_default();
    let presented = request
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if presented == Some(expected) {
        next.run(request).await
    } else {
        ApiError::new(StatusCode::UNAUTHORIZED, "missing or invalid bearer token").into_response()
    }
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not found")
}

async fn method_not_allowed() -> ApiError {
    ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "method not allowed")
}

async fn service_info(State(state): State<Arc<AppState>>) -> Json<ServiceInfo> {
    Json(ServiceInfo {
        id: state.config.service_id.clone(),
        name: state.config.service_name.clone(),
        description: "GA4GH Task Execution Service".to_string(),
        service_type: ServiceType {
            group: "org.ga4gh".to_string(),
            artifact: "tes".to_string(),
            version: TES_VERSION.to_string(),
        },
        storage: state.worker.registry().supported_protocols(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    })
}

async fn create_task(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> Result<Json<CreateTaskResponse>, ApiError> {
    let spec: TaskSpec = serde_json::from_slice(&body)
        .map_err(|err| ApiError::bad_request(format!("invalid task: {err}")))?;
    let id = state.worker.store().create_task(spec)?;
    Ok(Json(CreateTaskResponse { id }))
}

/// Query parameters, with repeated keys kept in order.
struct Query(Vec<(String, String)>);

impl Query {
    fn parse(raw: Option<&str>) -> Self {
        Query(
            url::form_urlencoded::parse(raw.unwrap_or("").as_bytes())
                .into_owned()
                .collect(),
        )
    }

    fn first(&self, key: &str) -> Option<&str> {
        self.0
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn all(&self, key: &str) -> Vec<&str> {
        self.0
            .iter()
            .filter(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .collect()
    }

    fn view(&self) -> Result<TaskView, ApiError> {
        match self.first("view") {
            None => Ok(TaskView::Minimal),
            Some(v) => v
                .parse()
                .map_err(|_| ApiError::bad_request(format!("unknown view `{v}`"))),
        }
    }
}

async fn list_tasks(
    State(state): State<Arc<AppState>>,
    RawQuery(raw): RawQuery,
) -> Result<Json<ListTasksResponse>, ApiError> {
    let query = Query::parse(raw.as_deref());
    let view = query.view()?;
    let page_size = match query.first("page_size") {
        None | Some("") => 0,
        Some(v) => v
            .parse::<usize>()
            .map_err(|_| ApiError::bad_request(format!("invalid page_size `{v}`")))?,
    };
    let state_filter = match query.first("state") {
        None | Some("") => None,
        Some(v) => Some(
            v.parse::<TaskState>()
                .map_err(|_| ApiError::bad_request(format!("unknown state `{v}`")))?,
        ),
    };
    let keys = query.all("tag_key");
    let values = query.all("tag_value");
    if keys.len() != values.len() {
        return Err(ApiError::bad_request(
            "tag_key and tag_value must be given the same number of times",
        ));
    }
    let tags: BTreeMap<String, String> = keys
        .into_iter()
        .zip(values)
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let filter = ListFilter {
        state: state_filter,
        name_prefix: query.first("name_prefix").map(str::to_string),
        tags,
    };
    let page_token = query.first("page_token").filter(|t| !t.is_empty());

    let page = state
        .worker
        .store()
        .list_tasks(&filter, page_size, page_token, view)?;
    Ok(Json(ListTasksResponse {
        tasks: page.items,
        next_page_token: page.next_page_token,
    }))
}

async fn get_task(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    RawQuery(raw): RawQuery,
) -> Result<Json<Task>, ApiError> {
    let view = Query::parse(raw.as_deref()).view()?;
    Ok(Json(state.worker.store().get_task(&id, view)?))
}

/// `POST /tasks/{id}:cancel`. The route captures `id:cancel` as one segment.
async fn cancel_task(
    State(state): State<Arc<AppState>>,
    Path(segment): Path<String>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let id = segment
        .strip_suffix(":cancel")
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not found"))?;
    state.worker.cancel_task(id)?;
    Ok(Json(serde_json::json!({})))
}

/// A server running on a background task.
pub struct ServerHandle {
    pub addr: std::net::SocketAddr,
    shutdown: tokio_util::sync::CancellationToken,
    join: tokio::task::JoinHandle<std::io::Result<()>>,
}

impl ServerHandle {
    /// `http://host:port`, plus the API prefix when enabled.
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub async fn stop(self) -> std::io::Result<()> {
        self.shutdown.cancel();
        self.join.await.map_err(std::io::Error::other)?
    }
}

/// Serve the API on `listener` until [`ServerHandle::stop`] is called.
pub fn spawn(
    listener: tokio::net::TcpListener,
    worker: Arc<Worker>,
    config: ServerConfig,
) -> std::io::Result<ServerHandle> {
    let addr = listener.local_addr()?;
    let shutdown = tokio_util::sync::CancellationToken::new();
    let app = router(worker, config);
    let signal = shutdown.clone();
    let join = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async move { signal.cancelled().await })
            .await
    });
    Ok(ServerHandle {
        addr,
        shutdown,
        join,
    })
}
