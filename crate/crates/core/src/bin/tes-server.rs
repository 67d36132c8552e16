use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, ValueEnum};
use tes_core::server::{self, ServerConfig};
use tes_core::staging::Registry;
use tes_core::store::{TaskStore, DEFAULT_CAPTURE_LIMIT};
use tes_core::worker::{ContainerAdapter, DirectAdapter, RuntimeAdapter, Worker, WorkerConfig};
use tracing_subscriber::EnvFilter;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Runtime {
    /// Run commands directly on the host, ignoring the image.
    Direct,
    /// Run each executor in a container via a docker-compatible CLI.
    Container,
}

/// Serve the GA4GH Task Execution Service API.
#[derive(Debug, Parser)]
#[command(version)]
struct Args {
    #[arg(long, env = "TES_LISTEN", default_value = "127.0.0.1:8000")]
    listen: SocketAddr,
    /// Serve under /ga4gh/tes/v1.
    #[arg(long)]
    prefix: bool,
    /// Require this bearer token on every request.
    #[arg(long, env = "TES_AUTH_TOKEN")]
    auth_token: Option<String>,
    /// Append-only journal used to recover tasks across restarts.
    #[arg(long)]
    journal: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Runtime::Direct)]
    runtime: Runtime,
    /// Container CLI used by the container runtime.
    #[arg(long, default_value = "docker")]
    container_bin: String,
    /// Maximum concurrently running tasks.
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    cpu_cores: Option<u64>,
    #[arg(long, default_value_t = 8.0)]
    ram_gb: f64,
    #[arg(long)]
    sandbox_dir: Option<PathBuf>,
    /// Bytes of stdout/stderr kept per executor.
    #[arg(long, default_value_t = DEFAULT_CAPTURE_LIMIT)]
    capture_limit: usize,
    /// Keep task sandboxes after they finish.
    #[arg(long)]
    retain_sandboxes: bool,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let args = Args::parse();

    let store = Arc::new(match &args.journal {
        Some(path) => TaskStore::open(path, args.capture_limit)?,
        None => TaskStore::with_capture_limit(args.capture_limit),
    });
    let adapter: Arc<dyn RuntimeAdapter> = match args.runtime {
        Runtime::Direct => Arc::new(DirectAdapter),
        Runtime::Container => Arc::new(ContainerAdapter::new(&args.container_bin)),
    };
    let mut config = WorkerConfig {
        total_ram_gb: args.ram_gb,
        capture_limit: args.capture_limit,
        retain_sandboxes: args.retain_sandboxes,
        ..WorkerConfig::default()
    };
    if let Some(n) = args.pool_size {
        config.pool_size = n;
    }
    if let Some(n) = args.cpu_cores {
        config.total_cpu_cores = n;
    }
    if let Some(dir) = args.sandbox_dir {
        config.sandbox_parent = dir;
    }

    let worker = Worker::new(store, Arc::new(Registry::with_defaults()), adapter, config);
    let recovered = worker.recover()?;
    if recovered > 0 {
        tracing::info!(recovered, "finalized tasks interrupted by a previous run");
    }
    let scheduler = worker.start();

    let listener = tokio::net::TcpListener::bind(args.listen).await?;
    let handle = server::spawn(
        listener,
        worker.clone(),
        ServerConfig {
            use_prefix: args.prefix,
            bearer_token: args.auth_token,
            ..ServerConfig::default()
        },
    )?;
    tracing::info!(addr = %handle.addr, runtime = ?args.runtime, "listening");

    tokio::signal::ctrl_c().await?;
    tracing::info!("shutting down");
    handle.stop().await?;
    worker.shutdown(Duration::from_secs(10)).await;
    scheduler.abort();
    Ok(())
}
