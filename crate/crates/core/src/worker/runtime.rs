//! Launching executor commands and supervising the resulting processes.

use std::collections::VecDeque;
use std::path::PathBuf;
use std::process::Stdio;
use std::time::Duration;

use async_trait::async_trait;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWriteExt};
use tokio::process::Command;
use tokio_util::sync::CancellationToken;

use super::sandbox::{Mount, Sandbox};
use crate::model::Executor;

const DEFAULT_PATH: &str = "/usr/local/sbin:/usr/local/bin:/usr/sbin:/usr/bin:/sbin:/bin";

#[derive(Debug, thiserror::Error)]
pub enum AdapterError {
    #[error("failed to launch `{program}`: {source}")]
    Launch {
        program: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Io(String),
}

/// One executor about to run.
#[derive(Debug, Clone, Copy)]
pub struct Invocation<'a> {
    pub task_id: &'a str,
    pub index: usize,
    pub executor: &'a Executor,
    pub sandbox: &'a Sandbox,
}

impl Invocation<'_> {
    fn workdir(&self) -> &str {
        self.executor.workdir.as_deref().unwrap_or("/")
    }
}

/// Turns an executor into a runnable command.
///
/// Stdio and process-group setup are applied by the caller; adapters only
/// choose the program, arguments, environment and working directory.
#[async_trait]
pub trait RuntimeAdapter: Send + Sync {
    fn name(&self) -> &str;

    fn prepare(&self, invocation: &Invocation<'_>) -> Result<Command, AdapterError>;

    /// Called after a canceled executor has been stopped.
    async fn cleanup(&self, _invocation: &Invocation<'_>) {}
}

fn is_path_char(c: char) -> bool {
    c.is_alphanumeric() || matches!(c, '_' | '-' | '.' | '/' | '~')
}

/// Replace task paths under any mount with their host locations.
///
/// A match must start where a path can start (beginning of text or after a
/// non-path character) and end at a path boundary, so `/data` rewrites in
/// `cat /data/x` but not in `/database` or `/usr/data`.
pub fn rewrite_task_paths(text: &str, mounts: &[Mount]) -> String {
    let mut sorted: Vec<&Mount> = mounts.iter().collect();
    sorted.sort_by_key(|m| std::cmp::Reverse(m.task_path.len()));

    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    let mut prev: Option<char> = None;
    while i < text.len() {
        let rest = &text[i..];
        let at_start = prev.is_none_or(|c| !is_path_char(c));
        let hit = at_start
            .then(|| {
                sorted.iter().find(|m| {
                    rest.starts_with(m.task_path.as_str())
                        && rest[m.task_path.len()..]
                            .chars()
                            .next()
                            .is_none_or(|c| c == '/' || !is_path_char(c))
                })
            })
            .flatten();
        match hit {
            Some(mount) => {
                out.push_str(&mount.host_path.to_string_lossy());
                i += mount.task_path.len();
                prev = mount.task_path.chars().last();
            }
            None => {
                let c = rest.chars().next().expect("non-empty");
                out.push(c);
                i += c.len_utf8();
                prev = Some(c);
            }
        }
    }
    out
}

/// Runs the command directly on the host inside the sandbox directory,
/// ignoring `image`. Task paths in arguments and environment values are
/// rewritten to their sandbox locations and the environment is scrubbed.
#[derive(Debug, Default, Clone, Copy)]
pub struct DirectAdapter;

#[async_trait]
impl RuntimeAdapter for DirectAdapter {
    fn name(&self) -> &str {
        "direct"
    }

    fn prepare(&self, inv: &Invocation<'_>) -> Result<Command, AdapterError> {
        let mounts = inv.sandbox.mounts();
        let argv: Vec<String> = inv
            .executor
            .command
            .iter()
            .map(|arg| rewrite_task_paths(arg, mounts))
            .collect();
        let workdir = inv
            .sandbox
            .host_path(inv.workdir())
            .map_err(|e| AdapterError::Io(e.to_string()))?;
        std::fs::create_dir_all(&workdir)
            .map_err(|e| AdapterError::Io(format!("{}: {e}", workdir.display())))?;
        let home = inv
            .sandbox
            .host_path("/tmp")
            .map_err(|e| AdapterError::Io(e.to_string()))?;

        let mut cmd = Command::new(&argv[0]);
        cmd.args(&argv[1..])
            .current_dir(workdir)
            .env_clear()
            .env("PATH", DEFAULT_PATH)
            .env("HOME", home);
        for (key, value) in &inv.executor.env {
            cmd.env(key, rewrite_task_paths(value, mounts));
        }
        Ok(cmd)
    }
}

/// Runs each executor in a container through a docker-compatible CLI
/// (`docker`, `podman`, ...). Every sandbox mount is bind-mounted read-write
/// at its task path.
#[derive(Debug, Clone)]
pub struct ContainerAdapter {
    binary: String,
}

impl ContainerAdapter {
    pub fn new(binary: impl Into<String>) -> Self {
        ContainerAdapter {
            binary: binary.into(),
        }
    }

    pub fn container_name(inv: &Invocation<'_>) -> String {
        format!("tes-{}-{}", inv.task_id, inv.index)
    }

    /// Arguments passed to the runtime binary.
    pub fn run_args(&self, inv: &Invocation<'_>) -> Vec<String> {
        let mut args = vec![
            "run".to_string(),
            "--rm".to_string(),
            "--name".to_string(),
            Self::container_name(inv),
        ];
        if inv.executor.stdin.is_some() {
            args.push("-i".to_string());
        }
        for mount in inv.sandbox.mounts() {
            args.push("-v".to_string());
            args.push(format!(
                "{}:{}:rw",
                mount.host_path.display(),
                mount.task_path
            ));
        }
        args.push("-w".to_string());
        args.push(inv.workdir().to_string());
        args.push("-e".to_string());
        args.push("HOME=/tmp".to_string());
        for (key, value) in &inv.executor.env {
            args.push("-e".to_string());
            args.push(format!("{key}={value}"));
        }
        args.push(inv.executor.image.clone());
        args.extend(inv.executor.command.iter().cloned());
        args
    }
}

#[async_trait]
impl RuntimeAdapter for ContainerAdapter {
    fn name(&self) -> &str {
        &self.binary
    }

    fn prepare(&self, inv: &Invocation<'_>) -> Result<Command, AdapterError> {
        let mut cmd = Command::new(&self.binary);
        cmd.args(self.run_args(inv));
        Ok(cmd)
    }

    async fn cleanup(&self, inv: &Invocation<'_>) {
        let status = Command::new(&self.binary)
            .args(["rm", "-f", &Self::container_name(inv)])
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status()
            .await;
        if let Err(err) = status {
            tracing::warn!(%err, "container cleanup failed");
        }
    }
}

/// Keeps the last `cap` bytes written to it.
#[derive(Debug)]
pub struct TailBuffer {
    cap: usize,
    buf: VecDeque<u8>,
}

impl TailBuffer {
    pub fn new(cap: usize) -> Self {
        TailBuffer {
            cap,
            buf: VecDeque::with_capacity(cap.min(8192)),
        }
    }

    pub fn push(&mut self, bytes: &[u8]) {
        let bytes = &bytes[bytes.len().saturating_sub(self.cap)..];
        let overflow = (self.buf.len() + bytes.len()).saturating_sub(self.cap);
        self.buf.drain(..overflow);
        self.buf.extend(bytes);
    }

    pub fn into_string(self) -> String {
        let bytes: Vec<u8> = self.buf.into();
        // drop a leading partial UTF-8 sequence left by the cut
        let start = bytes
            .iter()
            .take(4)
            .position(|b| (b & 0xc0) != 0x80)
            .unwrap_or(0);
        String::from_utf8_lossy(&bytes[start..]).into_owned()
    }
}

/// Where a process's stdio goes beyond the capture buffers.
#[derive(Debug, Default, Clone)]
pub struct StdioPlan {
    pub stdin: Option<PathBuf>,
    pub stdout: Option<PathBuf>,
    pub stderr: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProcessOutcome {
    /// `None` when the process was stopped by cancellation.
    pub exit_code: Option<i32>,
    pub canceled: bool,
    pub stdout_tail: String,
    pub stderr_tail: String,
}

async fn pump<R: AsyncRead + Unpin>(
    mut reader: R,
    tee: Option<PathBuf>,
    cap: usize,
) -> std::io::Result<String> {
    let mut file = match tee {
        Some(path) => Some(tokio::fs::File::create(path).await?),
        None => None,
    };
    let mut tail = TailBuffer::new(cap);
    let mut chunk = vec![0u8; 8192];
    loop {
        let n = reader.read(&mut chunk).await?;
        if n == 0 {
            break;
        }
        if let Some(file) = file.as_mut() {
            file.write_all(&chunk[..n]).await?;
        }
        tail.push(&chunk[..n]);
    }
    if let Some(mut file) = file {
        file.flush().await?;
    }
    Ok(tail.into_string())
}

fn signal_group(pgid: i32, signal: i32) {
    // SAFETY: kill(2) has no memory-safety preconditions; a stale group id
    // yields ESRCH, which is ignored.
    unsafe {
        libc::kill(-pgid, signal);
    }
}

fn exit_code(status: std::process::ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    status
        .code()
        .or_else(|| status.signal().map(|s| 128 + s))
        .unwrap_or(-1)
}

/// Spawn `cmd` in its own process group and wait for it, teeing output into
/// capped tails and optional files.
///
/// On cancellation the group gets SIGTERM, then SIGKILL after `grace`. The
/// whole group is killed once the leader exits so no descendants linger.
pub async fn supervise(
    mut cmd: Command,
    stdio: &StdioPlan,
    capture_limit: usize,
    cancel: &CancellationToken,
    grace: Duration,
) -> Result<ProcessOutcome, AdapterError> {
    let program = cmd.as_std().get_program().to_string_lossy().into_owned();
    let stdin = match &stdio.stdin {
        Some(path) => Stdio::from(
            std::fs::File::open(path)
                .map_err(|e| AdapterError::Io(format!("stdin {}: {e}", path.display())))?,
        ),
        None => Stdio::null(),
    };
    for path in [&stdio.stdout, &stdio.stderr].into_iter().flatten() {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| AdapterError::Io(format!("{}: {e}", parent.display())))?;
        }
    }
    cmd.stdin(stdin)
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0)
        .kill_on_drop(true);

    let mut child = cmd.spawn().map_err(|source| AdapterError::Launch {
        program: program.clone(),
        source,
    })?;
    let pgid = child.id().map(|pid| pid as i32);
    let stdout = tokio::spawn(pump(
        child.stdout.take().expect("piped"),
        stdio.stdout.clone(),
        capture_limit,
    ));
    let stderr = tokio::spawn(pump(
        child.stderr.take().expect("piped"),
        stdio.stderr.clone(),
        capture_limit,
    ));

    let (status, canceled) = tokio::select! {
        status = child.wait() => (status, false),
        _ = cancel.cancelled() => {
            if let Some(pgid) = pgid {
                signal_group(pgid, libc::SIGTERM);
            }
            let status = match tokio::time::timeout(grace, child.wait()).await {
                Ok(status) => status,
                Err(_) => {
                    if let Some(pgid) = pgid {
                        signal_group(pgid, libc::SIGKILL);
                    }
                    child.wait().await
                }
            };
            (status, true)
        }
    };
    if let Some(pgid) = pgid {
        signal_group(pgid, libc::SIGKILL);
    }
    let status = status.map_err(|e| AdapterError::Io(format!("waiting for {program}: {e}")))?;

    let collect = |joined: Result<std::io::Result<String>, tokio::task::JoinError>| {
        joined
            .map_err(|e| AdapterError::Io(e.to_string()))?
            .map_err(|e| AdapterError::Io(e.to_string()))
    };
    let stdout_tail = collect(stdout.await)?;
    let stderr_tail = collect(stderr.await)?;

    Ok(ProcessOutcome {
        exit_code: (!canceled).then(|| exit_code(status)),
        canceled,
        stdout_tail,
        stderr_tail,
    })
}
