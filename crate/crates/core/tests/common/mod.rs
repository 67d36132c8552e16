#![allow(dead_code)]

use std::sync::Arc;
use std::time::Duration;

use tes_core::model::{Executor, TaskSpec, TaskState, TaskView};
use tes_core::server::{self, ServerConfig, ServerHandle};
use tes_core::staging::Registry;
use tes_core::store::TaskStore;
use tes_core::worker::{DirectAdapter, Worker, WorkerConfig};

pub struct Harness {
    pub worker: Arc<Worker>,
    pub sandboxes: tempfile::TempDir,
}

impl Harness {
    pub fn new(pool: usize, cores: u64) -> Self {
        Self::with_registry(pool, cores, Registry::with_defaults())
    }

    pub fn with_registry(pool: usize, cores: u64, registry: Registry) -> Self {
        let sandboxes = tempfile::tempdir().unwrap();
        let config = WorkerConfig {
            pool_size: pool,
            total_cpu_cores: cores,
            total_ram_gb: 64.0,
            sandbox_parent: sandboxes.path().to_path_buf(),
            poll_interval: Duration::from_millis(50),
            ..WorkerConfig::default()
        };
        let worker = Worker::new(
            Arc::new(TaskStore::new()),
            Arc::new(registry),
            Arc::new(DirectAdapter),
            config,
        );
        Harness { worker, sandboxes }
    }

    pub fn store(&self) -> &Arc<TaskStore> {
        self.worker.store()
    }

    pub async fn serve(&self) -> ServerHandle {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        server::spawn(listener, self.worker.clone(), ServerConfig::default()).unwrap()
    }

    /// Poll until the task is terminal, returning the observed state sequence.
    pub async fn wait(&self, id: &str, timeout: Duration) -> TaskState {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            let state = self.store().get_task(id, TaskView::Minimal).unwrap().state;
            if state.is_terminal() || tokio::time::Instant::now() > deadline {
                return state;
            }
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
    }
}

pub fn sh(script: &str) -> Executor {
    Executor::new("alpine", ["sh", "-c", script])
}

pub fn spec_of(executors: Vec<Executor>) -> TaskSpec {
    TaskSpec {
        executors,
        ..Default::default()
    }
}

/// True if any live process has `marker` in its command line.
pub fn process_with_marker(marker: &str) -> bool {
    let Ok(entries) = std::fs::read_dir("/proc") else {
        return false;
    };
    entries.flatten().any(|entry| {
        std::fs::read(entry.path().join("cmdline"))
            .map(|raw| String::from_utf8_lossy(&raw).replace('\0', " ").contains(marker))
            .unwrap_or(false)
    })
}
