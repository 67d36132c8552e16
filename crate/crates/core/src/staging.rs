//! Moving task inputs into a sandbox and task outputs out of it.
//!
//! Storage locations are URL-ish strings. A [`Registry`] maps each scheme to
//! a [`ProtocolHandler`]; the scheme list it reports is what the service
//! advertises as supported storage.

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use walkdir::WalkDir;

use crate::model::{normalize_task_path, IoKind, IoParameter, OutputFileLog, TaskPathError};

#[derive(Debug, thiserror::Error)]
pub enum StagingError {
    #[error("cannot parse storage url `{0}`")]
    UnparsableUrl(String),
    #[error("unsupported protocol `{0}`")]
    UnsupportedProtocol(String),
    #[error("source not found: {0}")]
    SourceNotFound(String),
    #[error("transfer failed: {0}")]
    TransferFailed(String),
    #[error("declared output `{0}` was not created")]
    MissingOutput(String),
    #[error("path `{path}` {reason}")]
    InvalidPath { path: String, reason: TaskPathError },
}

impl StagingError {
    fn io(context: impl fmt::Display, err: io::Error) -> Self {
        StagingError::TransferFailed(format!("{context}: {err}"))
    }
}

/// A storage location split into scheme and scheme-specific remainder.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StorageUrl {
    scheme: String,
    remainder: String,
}

fn valid_scheme(scheme: &str) -> bool {
    let mut chars = scheme.chars();
    matches!(chars.next(), Some('a'..='z'))
        && chars.all(|c| matches!(c, 'a'..='z' | '0'..='9' | '+' | '.' | '-'))
}

impl StorageUrl {
    pub fn new(scheme: &str, remainder: impl Into<String>) -> Result<Self, StagingError> {
        let lowered = scheme.to_ascii_lowercase();
        if !valid_scheme(&lowered) {
            return Err(StagingError::UnparsableUrl(scheme.to_string()));
        }
        Ok(StorageUrl {
            scheme: lowered,
            remainder: remainder.into(),
        })
    }

    /// Split at the first `://`. Bare absolute paths are `file` URLs.
    pub fn parse(raw: &str) -> Result<Self, StagingError> {
        if let Some((scheme, rest)) = raw.split_once("://") {
            return StorageUrl::new(scheme, rest)
                .map_err(|_| StagingError::UnparsableUrl(raw.to_string()));
        }
        if raw.starts_with('/') {
            return Ok(StorageUrl {
                scheme: "file".to_string(),
                remainder: raw.to_string(),
            });
        }
        Err(StagingError::UnparsableUrl(raw.to_string()))
    }

    pub fn scheme(&self) -> &str {
        &self.scheme
    }

    pub fn remainder(&self) -> &str {
        &self.remainder
    }

    /// Append a `/`-separated relative path.
    pub fn join(&self, relative: &str) -> StorageUrl {
        StorageUrl {
            scheme: self.scheme.clone(),
            remainder: format!("{}/{}", self.remainder.trim_end_matches('/'), relative),
        }
    }
}

impl fmt::Display for StorageUrl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}://{}", self.scheme, self.remainder)
    }
}

impl FromStr for StorageUrl {
    type Err = StagingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StorageUrl::parse(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    pub read: bool,
    pub write: bool,
}

impl Capabilities {
    pub const READ_WRITE: Capabilities = Capabilities {
        read: true,
        write: true,
    };
}

/// Transfers bytes for one URL scheme.
#[async_trait]
pub trait ProtocolHandler: Send + Sync {
    fn capabilities(&self) -> Capabilities {
        Capabilities::READ_WRITE
    }

    /// Materialize a single file at `dest`. Returns the byte count.
    async fn fetch_file(&self, url: &StorageUrl, dest: &Path) -> Result<u64, StagingError>;

    /// Materialize a directory tree under `dest`.
    async fn fetch_dir(&self, url: &StorageUrl, _dest: &Path) -> Result<u64, StagingError> {
        Err(StagingError::TransferFailed(format!(
            "directory inputs are not supported for `{}`",
            url.scheme()
        )))
    }

    /// Upload the regular file at `src` to `url`. Returns the byte count.
    async fn put_file(&self, src: &Path, url: &StorageUrl) -> Result<u64, StagingError>;
}

/// Scheme → handler table.
#[derive(Clone, Default)]
pub struct Registry {
    handlers: BTreeMap<String, Arc<dyn ProtocolHandler>>,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("schemes", &self.supported_protocols())
            .finish()
    }
}

impl Registry {
    pub fn empty() -> Self {
        Registry::default()
    }

    /// `file`, `http` and `https`.
    pub fn with_defaults() -> Self {
        let http: Arc<dyn ProtocolHandler> = Arc::new(HttpHandler::default());
        let mut registry = Registry::empty();
        registry.register("file", Arc::new(FileHandler));
        registry.register("http", http.clone());
        registry.register("https", http);
        registry
    }

    /// Install `handler` for `scheme`, replacing any previous one.
    pub fn register(&mut self, scheme: &str, handler: Arc<dyn ProtocolHandler>) {
        self.handlers.insert(scheme.to_ascii_lowercase(), handler);
    }

    pub fn handler(&self, scheme: &str) -> Result<&Arc<dyn ProtocolHandler>, StagingError> {
        self.handlers
            .get(scheme)
            .ok_or_else(|| StagingError::UnsupportedProtocol(scheme.to_string()))
    }

    /// Sorted, deduplicated schemes of all registered handlers.
    pub fn supported_protocols(&self) -> Vec<String> {
        self.handlers.keys().cloned().collect()
    }
}

/// Map an absolute task path to its location under `sandbox_root`.
pub fn sandbox_path(sandbox_root: &Path, task_path: &str) -> Result<PathBuf, StagingError> {
    let parts = normalize_task_path(task_path).map_err(|reason| StagingError::InvalidPath {
        path: task_path.to_string(),
        reason,
    })?;
    let mut host = sandbox_root.to_path_buf();
    host.extend(parts);
    Ok(host)
}

async fn ensure_parent(path: &Path) -> Result<(), StagingError> {
    if let Some(parent) = path.parent() {
        tokio::fs::create_dir_all(parent)
            .await
            .map_err(|e| StagingError::io(parent.display(), e))?;
    }
    Ok(())
}

/// Bring one input into the sandbox. Returns the number of bytes written.
pub async fn stage_input(
    registry: &Registry,
    param: &IoParameter,
    sandbox_root: &Path,
) -> Result<u64, StagingError> {
    let dest = sandbox_path(sandbox_root, &param.path)?;
    if let Some(content) = &param.content {
        ensure_parent(&dest).await?;
        tokio::fs::write(&dest, content.as_bytes())
            .await
            .map_err(|e| StagingError::io(dest.display(), e))?;
        return Ok(content.len() as u64);
    }
    let url = StorageUrl::parse(&param.url)?;
    let handler = registry.handler(url.scheme())?;
    if !handler.capabilities().read {
        return Err(StagingError::UnsupportedProtocol(format!(
            "{} (read)",
            url.scheme()
        )));
    }
    match param.kind {
        IoKind::File => {
            ensure_parent(&dest).await?;
            handler.fetch_file(&url, &dest).await
        }
        IoKind::Directory => {
            tokio::fs::create_dir_all(&dest)
                .await
                .map_err(|e| StagingError::io(dest.display(), e))?;
            handler.fetch_dir(&url, &dest).await
        }
    }
}

/// Upload one declared output. Directory outputs upload every regular file
/// beneath the path to `url/<relative path>`.
pub async fn stage_output(
    registry: &Registry,
    param: &IoParameter,
    sandbox_root: &Path,
) -> Result<Vec<OutputFileLog>, StagingError> {
    let src = sandbox_path(sandbox_root, &param.path)?;
    let url = StorageUrl::parse(&param.url)?;
    let handler = registry.handler(url.scheme())?;
    if !handler.capabilities().write {
        return Err(StagingError::UnsupportedProtocol(format!(
            "{} (write)",
            url.scheme()
        )));
    }
    let meta = match tokio::fs::metadata(&src).await {
        Ok(meta) => meta,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(StagingError::MissingOutput(param.path.clone()))
        }
        Err(e) => return Err(StagingError::io(src.display(), e)),
    };

    match param.kind {
        IoKind::File => {
            if !meta.is_file() {
                return Err(StagingError::TransferFailed(format!(
                    "output `{}` is not a regular file",
                    param.path
                )));
            }
            let size = handler.put_file(&src, &url).await?;
            Ok(vec![OutputFileLog {
                url: url.to_string(),
                path: param.path.clone(),
                size_bytes: size,
            }])
        }
        IoKind::Directory => {
            if !meta.is_dir() {
                return Err(StagingError::TransferFailed(format!(
                    "output `{}` is not a directory",
                    param.path
                )));
            }
            let mut logs = Vec::new();
            for (file, relative) in regular_files(&src)? {
                let target = url.join(&relative);
                let size = handler.put_file(&file, &target).await?;
                logs.push(OutputFileLog {
                    url: target.to_string(),
                    path: format!("{}/{}", param.path.trim_end_matches('/'), relative),
                    size_bytes: size,
                });
            }
            Ok(logs)
        }
    }
}

/// Regular files below `root` with their `/`-joined relative paths, sorted.
fn regular_files(root: &Path) -> Result<Vec<(PathBuf, String)>, StagingError> {
    let mut files = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| StagingError::TransferFailed(e.to_string()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let relative = entry
            .path()
            .strip_prefix(root)
            .expect("walkdir yields children of root")
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/");
        files.push((entry.path().to_path_buf(), relative));
    }
    Ok(files)
}

/// Local filesystem storage.
#[derive(Debug, Default, Clone, Copy)]
pub struct FileHandler;

impl FileHandler {
    fn local_path(url: &StorageUrl) -> Result<PathBuf, StagingError> {
        let rest = url.remainder();
        let path = rest.strip_prefix("localhost").unwrap_or(rest);
        if !path.starts_with('/') {
            return Err(StagingError::UnparsableUrl(url.to_string()));
        }
        Ok(PathBuf::from(path))
    }
}

#[async_trait]
impl ProtocolHandler for FileHandler {
    async fn fetch_file(&self, url: &StorageUrl, dest: &Path) -> Result<u64, StagingError> {
        let src = Self::local_path(url)?;
        match tokio::fs::metadata(&src).await {
            Ok(meta) if meta.is_file() => {}
            Ok(_) => {
                return Err(StagingError::TransferFailed(format!(
                    "`{url}` is not a regular file"
                )))
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(StagingError::SourceNotFound(url.to_string()))
            }
            Err(e) => return Err(StagingError::io(url, e)),
        }
        tokio::fs::copy(&src, dest)
            .await
            .map_err(|e| StagingError::io(url, e))
    }

    async fn fetch_dir(&self, url: &StorageUrl, dest: &Path) -> Result<u64, StagingError> {
        let src = Self::local_path(url)?;
        match tokio::fs::metadata(&src).await {
            Ok(meta) if meta.is_dir() => {}
            Ok(_) => {
                return Err(StagingError::TransferFailed(format!(
                    "`{url}` is not a directory"
                )))
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(StagingError::SourceNotFound(url.to_string()))
            }
            Err(e) => return Err(StagingError::io(url, e)),
        }
        let mut total = 0;
        for entry in WalkDir::new(&src).sort_by_file_name() {
            let entry = entry.map_err(|e| StagingError::TransferFailed(e.to_string()))?;
            let relative = entry.path().strip_prefix(&src).expect("child of src");
            let target = dest.join(relative);
            if entry.file_type().is_dir() {
                tokio::fs::create_dir_all(&target)
                    .await
                    .map_err(|e| StagingError::io(target.display(), e))?;
            } else if entry.file_type().is_file() {
                total += tokio::fs::copy(entry.path(), &target)
                    .await
                    .map_err(|e| StagingError::io(entry.path().display(), e))?;
            }
        }
        Ok(total)
    }

    async fn put_file(&self, src: &Path, url: &StorageUrl) -> Result<u64, StagingError> {
        let dest = Self::local_path(url)?;
        ensure_parent(&dest).await?;
        tokio::fs::copy(src, &dest)
            .await
            .map_err(|e| StagingError::io(url, e))
    }
}

const HTTP_ATTEMPTS: u32 = 3;
const HTTP_BACKOFF: Duration = Duration::from_millis(500);

/// Plain GET/PUT over http and https. No authentication.
#[derive(Debug, Clone)]
pub struct HttpHandler {
    client: reqwest::Client,
}

impl Default for HttpHandler {
    fn default() -> Self {
        HttpHandler::new(reqwest::Client::new())
    }
}

enum Attempt<T> {
    Done(T),
    Retry(StagingError),
    Fail(StagingError),
}

impl HttpHandler {
    pub fn new(client: reqwest::Client) -> Self {
        HttpHandler { client }
    }

    async fn with_retries<T, F, Fut>(mut attempt: F) -> Result<T, StagingError>
    where
        F: FnMut() -> Fut,
        Fut: std::future::Future<Output = Attempt<T>>,
    {
        let mut last = None;
        for n in 1..=HTTP_ATTEMPTS {
            match attempt().await {
                Attempt::Done(value) => return Ok(value),
                Attempt::Fail(err) => return Err(err),
                Attempt::Retry(err) => last = Some(err),
            }
            if n < HTTP_ATTEMPTS {
                tokio::time::sleep(HTTP_BACKOFF * n).await;
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

#[async_trait]
impl ProtocolHandler for HttpHandler {
    async fn fetch_file(&self, url: &StorageUrl, dest: &Path) -> Result<u64, StagingError> {
        let target = url.to_string();
        let body = Self::with_retries(|| async {
            let resp = match self.client.get(&target).send().await {
                Ok(resp) => resp,
                Err(e) => return Attempt::Retry(StagingError::TransferFailed(e.to_string())),
            };
            let status = resp.status();
            if status == reqwest::StatusCode::NOT_FOUND {
                return Attempt::Fail(StagingError::SourceNotFound(target.clone()));
            }
            if status != reqwest::StatusCode::OK {
                let err = StagingError::TransferFailed(format!("GET {target}: {status}"));
                return if status.is_server_error() {
                    Attempt::Retry(err)
                } else {
                    Attempt::Fail(err)
                };
            }
            match resp.bytes().await {
                Ok(bytes) => Attempt::Done(bytes),
                Err(e) => Attempt::Retry(StagingError::TransferFailed(e.to_string())),
            }
        })
        .await?;
        tokio::fs::write(dest, &body)
            .await
            .map_err(|e| StagingError::io(dest.display(), e))?;
        Ok(body.len() as u64)
    }

    async fn put_file(&self, src: &Path, url: &StorageUrl) -> Result<u64, StagingError> {
        let body = tokio::fs::read(src)
            .await
            .map_err(|e| StagingError::io(src.display(), e))?;
        let size = body.len() as u64;
        let target = url.to_string();
        Self::with_retries(|| async {
            match self.client.put(&target).body(body.clone()).send().await {
                Ok(resp) if resp.status().is_success() => Attempt::Done(()),
                Ok(resp) => {
                    let status = resp.status();
                    let err = StagingError::TransferFailed(format!("PUT {target}: {status}"));
                    if status.is_server_error() {
                        Attempt::Retry(err)
                    } else {
                        Attempt::Fail(err)
                    }
                }
                Err(e) => Attempt::Retry(StagingError::TransferFailed(e.to_string())),
            }
        })
        .await?;
        Ok(size)
    }
}
