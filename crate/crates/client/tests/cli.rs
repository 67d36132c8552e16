use std::collections::BTreeSet;
use std::process::Output;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde_json::Value;
use tes_client::{ClientConfig, ClientError, TesClient};
use tes_core::model::{Executor, TaskSpec, TaskState, TaskView};
use tes_core::server::{self, ServerConfig, ServerHandle};
use tes_core::staging::Registry;
use tes_core::store::{ListFilter, TaskStore};
use tes_core::worker::{DirectAdapter, Worker, WorkerConfig};

struct Fixture {
    worker: Arc<Worker>,
    server: ServerHandle,
    _sandboxes: tempfile::TempDir,
}

impl Fixture {
    async fn new(run_tasks: bool) -> Self {
        let sandboxes = tempfile::tempdir().unwrap();
        let worker = Worker::new(
            Arc::new(TaskStore::new()),
            Arc::new(Registry::with_defaults()),
            Arc::new(DirectAdapter),
            WorkerConfig {
                pool_size: 4,
                total_cpu_cores: 4,
                sandbox_parent: sandboxes.path().to_path_buf(),
                poll_interval: Duration::from_millis(50),
                ..WorkerConfig::default()
            },
        );
        if run_tasks {
            worker.start();
        }
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let server = server::spawn(listener, worker.clone(), ServerConfig::default()).unwrap();
        Fixture {
            worker,
            server,
            _sandboxes: sandboxes,
        }
    }

    fn store(&self) -> &Arc<TaskStore> {
        self.worker.store()
    }

    async fn tes(&self, args: &[&str]) -> Output {
        tes_at(&self.server.base_url(), args).await
    }

    fn client(&self) -> TesClient {
        TesClient::new(ClientConfig::new(self.server.base_url())).unwrap()
    }
}

async fn tes_at(url: &str, args: &[&str]) -> Output {
    tokio::process::Command::new(env!("CARGO_BIN_EXE_tes"))
        .arg("--url")
        .arg(url)
        .args(args)
        .env_remove("TES_TOKEN")
        .output()
        .await
        .unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn sh_spec(script: &str) -> TaskSpec {
    TaskSpec {
        name: Some("cli".into()),
        executors: vec![Executor::new("alpine", ["sh", "-c", script])],
        ..Default::default()
    }
}

fn write_spec(dir: &tempfile::TempDir, spec: &TaskSpec) -> String {
    let path = dir.path().join("task.json");
    std::fs::write(&path, serde_json::to_string(spec).unwrap()).unwrap();
    path.display().to_string()
}

#[tokio::test]
async fn submit_get_round_trip() {
    let fx = Fixture::new(false).await;
    let dir = tempfile::tempdir().unwrap();
    let mut spec = sh_spec("echo hi");
    spec.tags.insert("owner".into(), "cli".into());
    let out = fx.tes(&["submit", &write_spec(&dir, &spec)]).await;
    assert!(out.status.success(), "{}", stderr(&out));
    let id = stdout(&out).trim().to_string();
    assert_eq!(fx.store().state(&id).unwrap(), TaskState::Queued);

    let out = fx.tes(&["get", &id, "--view", "MINIMAL"]).await;
    let body: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(body["id"], id.as_str());
    assert_eq!(body["state"], "QUEUED");

    let out = fx.tes(&["get", &id]).await;
    let mut body: Value = serde_json::from_str(&stdout(&out)).unwrap();
    let obj = body.as_object_mut().unwrap();
    for key in ["id", "state", "creation_time", "logs"] {
        obj.remove(key);
    }
    assert_eq!(serde_json::from_value::<TaskSpec>(body).unwrap(), spec);
}

#[tokio::test]
async fn submit_errors_exit_one() {
    let fx = Fixture::new(false).await;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.json");
    std::fs::write(&path, r#"{"executors":[]}"#).unwrap();
    let out = fx.tes(&["submit", path.to_str().unwrap()]).await;
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("executors"), "{}", stderr(&out));
    assert!(fx.store().is_empty());

    let out = fx.tes(&["cancel", "no-such-task"]).await;
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("404"));
    assert_eq!(fx.tes(&["get", "no-such-task"]).await.status.code(), Some(1));
}

#[tokio::test]
async fn unreachable_server_fails_fast() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let dir = tempfile::tempdir().unwrap();
    let file = write_spec(&dir, &sh_spec("true"));
    let started = Instant::now();
    let out = tes_at(&url, &["--timeout", "3", "submit", &file]).await;
    assert_eq!(out.status.code(), Some(1));
    assert!(started.elapsed() < Duration::from_secs(5));
}

#[tokio::test]
async fn wait_exit_codes() {
    let fx = Fixture::new(true).await;
    let client = fx.client();
    let ok = client.create_task(&sh_spec("echo done")).await.unwrap();
    let failed = client.create_task(&sh_spec("exit 3")).await.unwrap();
    let slow = client.create_task(&sh_spec("sleep 60")).await.unwrap();

    let out = fx.tes(&["wait", &ok, "--max-wait", "20", "--poll-interval", "0.1"]).await;
    assert_eq!((out.status.code(), stdout(&out).trim()), (Some(0), "COMPLETE"));
    let out = fx.tes(&["wait", &failed, "--max-wait", "20"]).await;
    assert_eq!((out.status.code(), stdout(&out).trim()), (Some(1), "EXECUTOR_ERROR"));

    let started = Instant::now();
    let out = fx.tes(&["wait", &slow, "--max-wait", "2"]).await;
    assert_eq!(out.status.code(), Some(2));
    assert!(started.elapsed() < Duration::from_secs(5));

    let out = fx.tes(&["cancel", &slow]).await;
    assert!(out.status.success());
    assert_eq!(stdout(&out).trim(), "{}");
    let out = fx.tes(&["wait", &slow, "--max-wait", "20"]).await;
    assert_eq!((out.status.code(), stdout(&out).trim()), (Some(1), "CANCELED"));
}

#[tokio::test]
async fn list_all_merges_pages() {
    let fx = Fixture::new(false).await;
    let store = fx.store();
    for i in 0..600 {
        let mut spec = sh_spec("true");
        spec.tags.insert("shard".into(), (i % 3).to_string());
        let id = store.create_task(spec).unwrap();
        if i % 5 != 0 {
            store.transition_state(&id, TaskState::Queued, TaskState::Initializing).unwrap();
            store.transition_state(&id, TaskState::Initializing, TaskState::Running).unwrap();
            store.transition_state(&id, TaskState::Running, TaskState::Complete).unwrap();
        }
    }
    let oracle: BTreeSet<String> = store
        .list_tasks(&ListFilter::default(), 2048, None, TaskView::Full)
        .unwrap()
        .items
        .into_iter()
        .filter(|t| t.state == TaskState::Complete && t.tags["shard"] == "1")
        .map(|t| t.id)
        .collect();
    assert_eq!(oracle.len(), 160);

    let out = fx
        .tes(&["list", "--state", "COMPLETE", "--tag", "shard=1", "--page-size", "50", "--all"])
        .await;
    assert!(out.status.success(), "{}", stderr(&out));
    let body: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(body.get("next_page_token").is_none());
    let ids: Vec<&str> = body["tasks"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t["id"].as_str().unwrap())
        .collect();
    assert_eq!(ids.len(), oracle.len());
    assert_eq!(ids.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>(), oracle);

    // without --all only the first page is printed, with its token
    let out = fx.tes(&["list", "--state", "COMPLETE"]).await;
    let body: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(body["tasks"].as_array().unwrap().len(), 256);
    let token = body["next_page_token"].as_str().unwrap();
    let out = fx.tes(&["list", "--state", "COMPLETE", "--page-token", token]).await;
    let body: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(body["tasks"].as_array().unwrap().len(), 480 - 256);
}

#[tokio::test]
async fn service_info_command() {
    let fx = Fixture::new(false).await;
    let out = fx.tes(&["service-info"]).await;
    assert!(out.status.success());
    let body: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(body["type"]["artifact"], "tes");
    assert_eq!(body["storage"], serde_json::json!(["file", "http", "https"]));
}

#[tokio::test]
async fn library_errors() {
    assert!(matches!(
        TesClient::new(ClientConfig::new("ftp://example.org")),
        Err(ClientError::InvalidUrl(_))
    ));
    assert!(TesClient::new(ClientConfig::new("not a url")).is_err());

    let fx = Fixture::new(false).await;
    let err = fx.client().get_task("missing", TaskView::Basic).await.unwrap_err();
    assert_eq!(err.status(), Some(404));
    let err = fx.client().create_task(&TaskSpec::default()).await.unwrap_err();
    assert_eq!(err.status(), Some(400));
}

#[tokio::test]
async fn base_url_with_prefix() {
    let sandboxes = tempfile::tempdir().unwrap();
    let worker = Worker::new(
        Arc::new(TaskStore::new()),
        Arc::new(Registry::with_defaults()),
        Arc::new(DirectAdapter),
        WorkerConfig {
            sandbox_parent: sandboxes.path().to_path_buf(),
            ..WorkerConfig::default()
        },
    );
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let config = ServerConfig {
        use_prefix: true,
        bearer_token: Some("tok".into()),
        ..ServerConfig::default()
    };
    let server = server::spawn(listener, worker, config).unwrap();
    let base = format!("{}/ga4gh/tes/v1", server.base_url());
    let client = TesClient::new(ClientConfig {
        bearer_token: Some("tok".into()),
        ..ClientConfig::new(base.clone())
    })
    .unwrap();
    let id = client.create_task(&sh_spec("true")).await.unwrap();
    assert_eq!(client.get_task(&id, TaskView::Minimal).await.unwrap().state, TaskState::Queued);
    let anonymous = TesClient::new(ClientConfig::new(base)).unwrap();
    assert_eq!(anonymous.service_info().await.unwrap_err().status(), Some(401));
}
