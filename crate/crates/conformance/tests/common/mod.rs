#![allow(dead_code)]

use std::sync::Arc;
use std::time::Duration;

use axum::extract::Path;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};
use tes_core::server::{self, ServerConfig, ServerHandle};
use tes_core::staging::Registry;
use tes_core::store::TaskStore;
use tes_core::worker::{DirectAdapter, Worker, WorkerConfig};

/// A real server with a running worker.
pub struct LiveServer {
    pub worker: Arc<Worker>,
    pub handle: ServerHandle,
    pub sandboxes: tempfile::TempDir,
}

impl LiveServer {
    pub async fn start(pool: usize, cores: u64, registry: Registry) -> Self {
        let sandboxes = tempfile::tempdir().unwrap();
        let worker = Worker::new(
            Arc::new(TaskStore::new()),
            Arc::new(registry),
            Arc::new(DirectAdapter),
            WorkerConfig {
                pool_size: pool,
                total_cpu_cores: cores,
                total_ram_gb: 64.0,
                sandbox_parent: sandboxes.path().to_path_buf(),
                poll_interval: Duration::from_millis(50),
                ..WorkerConfig::default()
            },
        );
        worker.start();
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let handle = server::spawn(listener, worker.clone(), ServerConfig::default()).unwrap();
        LiveServer {
            worker,
            handle,
            sandboxes,
        }
    }

    pub fn url(&self) -> String {
        self.handle.base_url()
    }
}

/// Serve `app` on an ephemeral port and return its base URL.
pub async fn serve(app: Router) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}")
}

/// A deterministic fake whose tasks never leave RUNNING.
pub fn running_forever() -> Router {
    Router::new()
        .route(
            "/service-info",
            get(|| async {
                Json(json!({
                    "id": "mock", "name": "mock", "description": "",
                    "type": {"group": "org.ga4gh", "artifact": "tes", "version": "1.1.0"},
                    "storage": ["file"], "version": "0"
                }))
            }),
        )
        .route("/tasks", post(|| async { Json(json!({"id": "mock-task"})) }))
        .route(
            "/tasks/{id}",
            get(|Path(id): Path<String>| async move {
                Json(json!({"id": id, "state": "RUNNING"}))
            }),
        )
        .fallback(|| async {
            (
                axum::http::StatusCode::NOT_FOUND,
                Json::<Value>(json!({"message": "not found", "status": 404})),
            )
        })
}
