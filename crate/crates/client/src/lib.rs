//! Async client for a TES server.

use std::time::Duration;

use reqwest::Method;
use serde::de::DeserializeOwned;
use tes_core::model::{Task, TaskSpec, TaskState, TaskView};
use tes_core::server::{CreateTaskResponse, ErrorBody, ListTasksResponse, ServiceInfo};
use tes_core::store::ListFilter;
use url::Url;

pub const DEFAULT_POLL_INTERVAL: Duration = Duration::from_millis(500);

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("invalid base url `{0}`: must be http(s)")]
    InvalidUrl(String),
    #[error("server returned {status}: {message}")]
    Api { status: u16, message: String },
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("unexpected response: {0}")]
    Decode(String),
    #[error("timed out waiting for task {id} (last state {state})")]
    WaitTimeout { id: String, state: TaskState },
}

impl ClientError {
    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub base_url: String,
    pub timeout: Duration,
    pub bearer_token: Option<String>,
}

impl ClientConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        ClientConfig {
            base_url: base_url.into(),
            timeout: Duration::from_secs(30),
            bearer_token: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TesClient {
    base: Url,
    http: reqwest::Client,
    token: Option<String>,
}

impl TesClient {
    pub fn new(config: ClientConfig) -> Result<Self, ClientError> {
        let mut base = Url::parse(&config.base_url)
            .map_err(|_| ClientError::InvalidUrl(config.base_url.clone()))?;
        if !matches!(base.scheme(), "http" | "https") || base.cannot_be_a_base() {
            return Err(ClientError::InvalidUrl(config.base_url));
        }
        if !base.path().ends_with('/') {
            let path = format!("{}/", base.path());
            base.set_path(&path);
        }
        let http = reqwest::Client::builder().timeout(config.timeout).build()?;
        Ok(TesClient {
            base,
            http,
            token: config.bearer_token,
        })
    }

    pub fn base_url(&self) -> &Url {
        &self.base
    }

    async fn call<T: DeserializeOwned>(
        &self,
        method: Method,
        path: &str,
        query: &[(&str, String)],
        body: Option<String>,
    ) -> Result<T, ClientError> {
        let mut url = self
            .base
            .join(path)
            .map_err(|e| ClientError::Decode(e.to_string()))?;
        if !query.is_empty() {
            let mut pairs = url.query_pairs_mut();
            for (key, value) in query {
                pairs.append_pair(key, value);
            }
        }
        let mut req = self.http.request(method, url);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        if let Some(body) = body {
            req = req.header("content-type", "application/json").body(body);
        }
        let resp = req.send().await?;
        let status = resp.status();
        let bytes = resp.bytes().await?;
        if !status.is_success() {
            let message = serde_json::from_slice::<ErrorBody>(&bytes)
                .map(|e| e.message)
                .unwrap_or_else(|_| String::from_utf8_lossy(&bytes).into_owned());
            return Err(ClientError::Api {
                status: status.as_u16(),
                message,
            });
        }
        serde_json::from_slice(&bytes).map_err(|e| ClientError::Decode(e.to_string()))
    }

    pub async fn service_info(&self) -> Result<ServiceInfo, ClientError> {
        self.call(Method::GET, "service-info", &[], None).await
    }

    pub async fn create_task(&self, spec: &TaskSpec) -> Result<String, ClientError> {
        let body = serde_json::to_string(spec).map_err(|e| ClientError::Decode(e.to_string()))?;
        let resp: CreateTaskResponse = self.call(Method::POST, "tasks", &[], Some(body)).await?;
        Ok(resp.id)
    }

    pub async fn get_task(&self, id: &str, view: TaskView) -> Result<Task, ClientError> {
        let query = [("view", view.as_str().to_string())];
        self.call(Method::GET, &format!("tasks/{id}"), &query, None)
            .await
    }

    /// Fetch one page. A `page_size` of 0 leaves the server default.
    pub async fn list_tasks(
        &self,
        filter: &ListFilter,
        view: TaskView,
        page_size: usize,
        page_token: Option<&str>,
    ) -> Result<ListTasksResponse, ClientError> {
        let mut query = vec![("view", view.as_str().to_string())];
        if page_size > 0 {
            query.push(("page_size", page_size.to_string()));
        }
        if let Some(token) = page_token {
            query.push(("page_token", token.to_string()));
        }
        if let Some(state) = filter.state {
            query.push(("state", state.to_string()));
        }
        if let Some(prefix) = &filter.name_prefix {
            query.push(("name_prefix", prefix.clone()));
        }
        for (key, value) in &filter.tags {
            query.push(("tag_key", key.clone()));
            query.push(("tag_value", value.clone()));
        }
        self.call(Method::GET, "tasks", &query, None).await
    }

    /// Follow `next_page_token` until the listing is exhausted.
    pub async fn list_all(
        &self,
        filter: &ListFilter,
        view: TaskView,
        page_size: usize,
    ) -> Result<Vec<Task>, ClientError> {
        let mut tasks = Vec::new();
        let mut token = None;
        loop {
            let page = self
                .list_tasks(filter, view, page_size, token.as_deref())
                .await?;
            tasks.extend(page.tasks);
            match page.next_page_token {
                Some(next) => token = Some(next),
                None => return Ok(tasks),
            }
        }
    }

    pub async fn cancel_task(&self, id: &str) -> Result<(), ClientError> {
        let _: serde_json::Value = self
            .call(Method::POST, &format!("tasks/{id}:cancel"), &[], None)
            .await?;
        Ok(())
    }

    /// Poll with the MINIMAL view until the task is terminal.
    pub async fn wait(
        &self,
        id: &str,
        max_wait: Duration,
        poll_interval: Duration,
    ) -> Result<TaskState, ClientError> {
        let deadline = tokio::time::Instant::now() + max_wait;
        loop {
            let state = self.get_task(id, TaskView::Minimal).await?.state;
            if state.is_terminal() {
                return Ok(state);
            }
            let now = tokio::time::Instant::now();
            if now >= deadline {
                return Err(ClientError::WaitTimeout {
                    id: id.to_string(),
                    state,
                });
            }
            tokio::time::sleep(poll_interval.min(deadline - now)).await;
        }
    }
}
