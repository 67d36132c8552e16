use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use tes_conformance::{format_report, load_suite, run_suite_with, RunOptions};

/// Run declarative conformance suites against a TES server.
#[derive(Debug, Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a suite and exit 0 only if every case passes.
    Run {
        suite: PathBuf,
        /// Base URL of the server, including any path prefix.
        #[arg(long, env = "TES_URL")]
        url: String,
        /// Also write the report as JSON.
        #[arg(long)]
        json_report: Option<PathBuf>,
        /// Override a suite variable; repeatable.
        #[arg(long = "var", value_parser = parse_var)]
        vars: Vec<(String, String)>,
        #[arg(long, env = "TES_TOKEN", hide_env_values = true)]
        token: Option<String>,
        /// Per-request timeout in seconds.
        #[arg(long, default_value_t = 30)]
        timeout: u64,
        /// Cap every poll timeout at this many seconds.
        #[arg(long)]
        max_poll_timeout: Option<f64>,
    },
    /// Check a suite file without running it.
    Check { suite: PathBuf },
}

fn parse_var(raw: &str) -> Result<(String, String), String> {
    raw.split_once('=')
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| format!("expected name=value, got `{raw}`"))
}

#[tokio::main(flavor = "current_thread")]
async fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Check { suite } => match load_suite(&suite) {
            Ok(suite) => {
                println!("{}: {} cases", suite.name, suite.cases.len());
                ExitCode::SUCCESS
            }
            Err(err) => {
                eprintln!("tes-conformance: {err}");
                ExitCode::from(2)
            }
        },
        Command::Run {
            suite,
            url,
            json_report,
            vars,
            token,
            timeout,
            max_poll_timeout,
        } => {
            let suite = match load_suite(&suite) {
                Ok(s) => s,
                Err(err) => {
                    eprintln!("tes-conformance: {err}");
                    return ExitCode::from(2);
                }
            };
            let options = RunOptions {
                bearer_token: token,
                variables: vars.into_iter().collect::<BTreeMap<_, _>>(),
                request_timeout: Duration::from_secs(timeout.max(1)),
                max_poll_timeout: max_poll_timeout
                    .and_then(|s| Duration::try_from_secs_f64(s).ok()),
            };
            let report = run_suite_with(&suite, &url, &options).await;
            print!("{}", format_report(&report));
            if let Some(path) = json_report {
                let json = serde_json::to_string_pretty(&report).expect("report serializes");
                if let Err(err) = std::fs::write(&path, json) {
                    eprintln!("tes-conformance: writing {}: {err}", path.display());
                    return ExitCode::from(2);
                }
            }
            if report.all_passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
    }
}
