use std::collections::BTreeMap;
use std::io::Read;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;
use tes_client::{ClientConfig, ClientError, TesClient, DEFAULT_POLL_INTERVAL};
use tes_core::model::{TaskSpec, TaskState, TaskView};
use tes_core::server::ListTasksResponse;
use tes_core::store::ListFilter;

/// Submit and inspect tasks on a GA4GH TES server.
#[derive(Debug, Parser)]
#[command(version)]
struct Cli {
    /// Server base URL.
    #[arg(long, env = "TES_URL", default_value = "http://127.0.0.1:8000", global = true)]
    url: String,
    /// Per-request timeout in seconds.
    #[arg(long, default_value_t = 30.0, global = true)]
    timeout: f64,
    #[arg(long, env = "TES_TOKEN", global = true, hide_env_values = true)]
    token: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Submit a task from a JSON file (`-` reads stdin) and print its id.
    Submit { file: PathBuf },
    Get {
        id: String,
        #[arg(long, default_value = "FULL")]
        view: TaskView,
    },
    List {
        #[arg(long)]
        state: Option<TaskState>,
        #[arg(long)]
        name_prefix: Option<String>,
        /// Tag filter as key=value; repeatable.
        #[arg(long = "tag", value_parser = parse_tag)]
        tags: Vec<(String, String)>,
        #[arg(long, default_value = "MINIMAL")]
        view: TaskView,
        #[arg(long, default_value_t = 0)]
        page_size: usize,
        #[arg(long)]
        page_token: Option<String>,
        /// Follow page tokens and print every matching task.
        #[arg(long, conflicts_with = "page_token")]
        all: bool,
    },
    Cancel { id: String },
    /// Wait for a task to finish and print its final state.
    ///
    /// Exits 0 if it completed, 1 if it ended in any other state, 2 on timeout.
    Wait {
        id: String,
        /// Give up after this many seconds.
        #[arg(long, default_value_t = 3600.0)]
        max_wait: f64,
        #[arg(long, default_value_t = DEFAULT_POLL_INTERVAL.as_secs_f64())]
        poll_interval: f64,
    },
    ServiceInfo,
}

fn parse_tag(raw: &str) -> Result<(String, String), String> {
    raw.split_once('=')
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| format!("expected key=value, got `{raw}`"))
}

fn seconds(value: f64, flag: &str) -> anyhow::Result<Duration> {
    Duration::try_from_secs_f64(value)
        .ok()
        .filter(|d| !d.is_zero())
        .ok_or_else(|| anyhow!("--{flag} must be a positive number of seconds"))
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn read_spec(file: &PathBuf) -> anyhow::Result<TaskSpec> {
    let mut raw = String::new();
    if file.as_os_str() == "-" {
        std::io::stdin().read_to_string(&mut raw)?;
    } else {
        raw = std::fs::read_to_string(file)
            .with_context(|| format!("reading {}", file.display()))?;
    }
    serde_json::from_str(&raw).with_context(|| format!("parsing {}", file.display()))
}

async fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let client = TesClient::new(ClientConfig {
        base_url: cli.url,
        timeout: seconds(cli.timeout, "timeout")?,
        bearer_token: cli.token,
    })?;

    match cli.command {
        Command::Submit { file } => {
            let spec = read_spec(&file)?;
            println!("{}", client.create_task(&spec).await?);
        }
        Command::Get { id, view } => print_json(&client.get_task(&id, view).await?)?,
        Command::List {
            state,
            name_prefix,
            tags,
            view,
            page_size,
            page_token,
            all,
        } => {
            let filter = ListFilter {
                state,
                name_prefix,
                tags: tags.into_iter().collect::<BTreeMap<_, _>>(),
            };
            let page = if all {
                ListTasksResponse {
                    tasks: client.list_all(&filter, view, page_size).await?,
                    next_page_token: None,
                }
            } else {
                client
                    .list_tasks(&filter, view, page_size, page_token.as_deref())
                    .await?
            };
            print_json(&page)?;
        }
        Command::Cancel { id } => {
            client.cancel_task(&id).await?;
            println!("{{}}");
        }
        Command::Wait {
            id,
            max_wait,
            poll_interval,
        } => {
            let max_wait = seconds(max_wait, "max-wait")?;
            let poll_interval = seconds(poll_interval, "poll-interval")?;
            return match client.wait(&id, max_wait, poll_interval).await {
                Ok(state) => {
                    println!("{state}");
                    Ok(if state == TaskState::Complete {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(1)
                    })
                }
                Err(err @ ClientError::WaitTimeout { .. }) => {
                    eprintln!("tes: {err}");
                    Ok(ExitCode::from(2))
                }
                Err(err) => Err(err.into()),
            };
        }
        Command::ServiceInfo => print_json(&client.service_info().await?)?,
    }
    Ok(ExitCode::SUCCESS)
}

#[tokio::main(flavor = "current_thread")]
async fn main() -> ExitCode {
    match run(Cli::parse()).await {
        Ok(code) => code,
        Err(err) => {
            eprintln!("tes: {err:#}");
            ExitCode::from(1)
        }
    }
}
