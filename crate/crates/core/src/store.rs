//! In-process task registry with optional append-only journal.
//!
//! All operations take a single lock, so every call is linearizable.
//! State changes only happen through [`TaskStore::transition_state`], which
//! is a compare-and-set over the lifecycle edge relation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine as _;
use chrono::{DateTime, TimeZone, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::sync::Notify;

use crate::model::{
    apply_view, is_valid_transition, validate_task_spec, ExecutorLog, OutputFileLog, Task,
    TaskLog, TaskSpec, TaskState, TaskView, ValidationError,
};

pub const DEFAULT_PAGE_SIZE: usize = 256;
pub const MAX_PAGE_SIZE: usize = 2048;
pub const DEFAULT_CAPTURE_LIMIT: usize = 64 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("task `{0}` not found")]
    NotFound(String),
    #[error("invalid task: {}", first_violation(.0))]
    ValidationFailed(Vec<ValidationError>),
    #[error("invalid page token")]
    InvalidPageToken,
    #[error("storage unavailable: {0}")]
    StorageUnavailable(#[from] io::Error),
}

fn first_violation(errors: &[ValidationError]) -> String {
    errors
        .first()
        .map(ToString::to_string)
        .unwrap_or_default()
}

/// Listing filter. All given criteria must hold.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ListFilter {
    pub state: Option<TaskState>,
    pub name_prefix: Option<String>,
    /// An empty value only requires the key to be present.
    pub tags: BTreeMap<String, String>,
}

impl ListFilter {
    pub fn matches(&self, task: &Task) -> bool {
        if self.state.is_some_and(|s| s != task.state) {
            return false;
        }
        if let Some(prefix) = &self.name_prefix {
            if !task.name.as_deref().unwrap_or("").starts_with(prefix.as_str()) {
                return false;
            }
        }
        self.tags.iter().all(|(key, want)| match task.tags.get(key) {
            Some(have) => want.is_empty() || have == want,
            None => false,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Page {
    pub items: Vec<Task>,
    pub next_page_token: Option<String>,
}

/// Sort key of a listed task. Listings run in descending key order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct SortKey {
    created: DateTime<Utc>,
    id: String,
}

/// Opaque pagination cursor: the sort key of the last item returned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PageToken {
    pub creation_time: DateTime<Utc>,
    pub id: String,
}

impl PageToken {
    pub fn encode(&self) -> String {
        let nanos = self
            .creation_time
            .timestamp_nanos_opt()
            .expect("timestamp within i64 nanoseconds");
        URL_SAFE_NO_PAD.encode(format!("{nanos}:{}", self.id))
    }

    pub fn decode(token: &str) -> Result<Self, StoreError> {
        let raw = URL_SAFE_NO_PAD
            .decode(token)
            .map_err(|_| StoreError::InvalidPageToken)?;
        let raw = String::from_utf8(raw).map_err(|_| StoreError::InvalidPageToken)?;
        let (nanos, id) = raw.split_once(':').ok_or(StoreError::InvalidPageToken)?;
        let nanos: i64 = nanos.parse().map_err(|_| StoreError::InvalidPageToken)?;
        if id.is_empty() {
            return Err(StoreError::InvalidPageToken);
        }
        Ok(PageToken {
            creation_time: Utc.timestamp_nanos(nanos),
            id: id.to_string(),
        })
    }
}

/// An incremental addition to a task's single log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogUpdate {
    Started { at: DateTime<Utc> },
    Ended { at: DateTime<Utc> },
    /// Merge into the executor log at `index`; fields set in `log` win.
    Executor { index: usize, log: ExecutorLog },
    OutputFiles { files: Vec<OutputFileLog> },
    System { line: String },
}

/// One applied state change.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub task_id: String,
    pub from: TaskState,
    pub to: TaskState,
}

#[derive(Debug, Serialize, Deserialize)]
struct JournalRecord {
    event: JournalEvent,
    task_id: String,
    payload: serde_json::Value,
    timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum JournalEvent {
    Created,
    State,
    Log,
}

#[derive(Default)]
struct Inner {
    tasks: HashMap<String, Task>,
    order: BTreeSet<SortKey>,
    transitions: Vec<TransitionRecord>,
    journal: Option<File>,
}

impl Inner {
    fn append(
        &mut self,
        event: JournalEvent,
        task_id: &str,
        payload: serde_json::Value,
    ) -> io::Result<()> {
        let Some(journal) = self.journal.as_mut() else {
            return Ok(());
        };
        let record = JournalRecord {
            event,
            task_id: task_id.to_string(),
            payload,
            timestamp: Utc::now(),
        };
        let mut line = serde_json::to_vec(&record)?;
        line.push(b'\n');
        journal.write_all(&line)?;
        journal.flush()
    }

    fn insert(&mut self, task: Task) {
        let created = task.creation_time.unwrap_or_default();
        self.order.insert(SortKey {
            created,
            id: task.id.clone(),
        });
        self.tasks.insert(task.id.clone(), task);
    }

    fn apply_log(&mut self, id: &str, update: LogUpdate, capture_limit: usize) {
        let Some(task) = self.tasks.get_mut(id) else {
            return;
        };
        if task.logs.is_empty() {
            task.logs.push(TaskLog::default());
        }
        let log = &mut task.logs[0];
        match update {
            LogUpdate::Started { at } => log.start_time = Some(at),
            LogUpdate::Ended { at } => log.end_time = Some(at),
            LogUpdate::Executor { index, log: update } => {
                if log.executor_logs.len() <= index {
                    log.executor_logs.resize_with(index + 1, ExecutorLog::default);
                }
                let entry = &mut log.executor_logs[index];
                if update.start_time.is_some() {
                    entry.start_time = update.start_time;
                }
                if update.end_time.is_some() {
                    entry.end_time = update.end_time;
                }
                if let Some(out) = update.stdout_tail {
                    entry.stdout_tail = Some(tail(out, capture_limit));
                }
                if let Some(err) = update.stderr_tail {
                    entry.stderr_tail = Some(tail(err, capture_limit));
                }
                if update.exit_code.is_some() {
                    entry.exit_code = update.exit_code;
                }
            }
            LogUpdate::OutputFiles { files } => log.output_files.extend(files),
            LogUpdate::System { line } => log.system_logs.push(line),
        }
    }
}

/// Keep at most the final `limit` bytes of `text`, cut on a char boundary.
pub fn tail(text: String, limit: usize) -> String {
    if text.len() <= limit {
        return text;
    }
    let mut start = text.len() - limit;
    while !text.is_char_boundary(start) {
        start += 1;
    }
    text[start..].to_string()
}

const ID_ALPHABET: &[u8; 32] = b"abcdefghijklmnopqrstuvwxyz234567";

/// 26 lowercase base-32 characters carrying 128 random bits.
pub fn new_task_id() -> String {
    let bits: u128 = rand::random();
    (0..26)
        .rev()
        .map(|i| ID_ALPHABET[((bits >> (i * 5)) & 0x1f) as usize] as char)
        .collect()
}

pub struct TaskStore {
    inner: Mutex<Inner>,
    capture_limit: usize,
    created: Notify,
}

impl Default for TaskStore {
    fn default() -> Self {
        Self::new()
    }
}

impl TaskStore {
    /// A memory-only store.
    pub fn new() -> Self {
        Self::with_capture_limit(DEFAULT_CAPTURE_LIMIT)
    }

    pub fn with_capture_limit(capture_limit: usize) -> Self {
        TaskStore {
            inner: Mutex::new(Inner::default()),
            capture_limit,
            created: Notify::new(),
        }
    }

    /// Open a journal-backed store, replaying any existing records first.
    pub fn open(path: &Path, capture_limit: usize) -> Result<Self, StoreError> {
        let mut inner = Inner::default();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (lineno, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: JournalRecord = match serde_json::from_str(&line) {
                    Ok(r) => r,
                    Err(err) => {
                        // a torn final write is expected after a crash
                        tracing::warn!(lineno, %err, "skipping unreadable journal record");
                        continue;
                    }
                };
                replay(&mut inner, record, capture_limit);
            }
        }
        inner.journal = Some(OpenOptions::new().create(true).append(true).open(path)?);
        Ok(TaskStore {
            inner: Mutex::new(inner),
            capture_limit,
            created: Notify::new(),
        })
    }

    pub fn capture_limit(&self) -> usize {
        self.capture_limit
    }

    /// Resolves the next time a task is created.
    pub async fn task_created(&self) {
        self.created.notified().await
    }

    pub fn create_task(&self, spec: TaskSpec) -> Result<String, StoreError> {
        let errors = validate_task_spec(&spec);
        if !errors.is_empty() {
            return Err(StoreError::ValidationFailed(errors));
        }
        let mut inner = self.inner.lock();
        let id = loop {
            let id = new_task_id();
            if !inner.tasks.contains_key(&id) {
                break id;
            }
        };
        let task = Task::new(id.clone(), spec, Utc::now());
        inner.append(JournalEvent::Created, &id, serde_json::to_value(&task)?)?;
        inner.insert(task);
        drop(inner);
        self.created.notify_waiters();
        Ok(id)
    }

    pub fn get_task(&self, id: &str, view: TaskView) -> Result<Task, StoreError> {
        let inner = self.inner.lock();
        inner
            .tasks
            .get(id)
            .map(|task| apply_view(task, view))
            .ok_or_else(|| StoreError::NotFound(id.to_string()))
    }

    pub fn state(&self, id: &str) -> Result<TaskState, StoreError> {
        let inner = self.inner.lock();
        inner
            .tasks
            .get(id)
            .map(|task| task.state)
            .ok_or_else(|| StoreError::NotFound(id.to_string()))
    }

    /// List matching tasks newest first. A `page_size` of zero selects the
    /// default; larger values are clamped to [`MAX_PAGE_SIZE`].
    pub fn list_tasks(
        &self,
        filter: &ListFilter,
        page_size: usize,
        page_token: Option<&str>,
        view: TaskView,
    ) -> Result<Page, StoreError> {
        let page_size = match page_size {
            0 => DEFAULT_PAGE_SIZE,
            n => n.min(MAX_PAGE_SIZE),
        };
        let after = page_token
            .map(PageToken::decode)
            .transpose()?
            .map(|t| SortKey {
                created: t.creation_time,
                id: t.id,
            });

        let inner = self.inner.lock();
        let candidates: Box<dyn Iterator<Item = &SortKey>> = match &after {
            Some(key) => Box::new(inner.order.range(..key).rev()),
            None => Box::new(inner.order.iter().rev()),
        };
        let mut matching = candidates
            .map(|key| &inner.tasks[&key.id])
            .filter(|task| filter.matches(task));

        let items: Vec<Task> = matching
            .by_ref()
            .take(page_size)
            .map(|task| apply_view(task, view))
            .collect();
        let more = matching.next().is_some();
        let next_page_token = match (more, items.last()) {
            (true, Some(last)) => {
                let created = inner.tasks[&last.id].creation_time.unwrap_or_default();
                Some(
                    PageToken {
                        creation_time: created,
                        id: last.id.clone(),
                    }
                    .encode(),
                )
            }
            _ => None,
        };
        Ok(Page {
            items,
            next_page_token,
        })
    }

    /// Ids of QUEUED tasks, oldest first.
    pub fn queued(&self) -> Vec<String> {
        let inner = self.inner.lock();
        inner
            .order
            .iter()
            .filter(|key| inner.tasks[&key.id].state == TaskState::Queued)
            .map(|key| key.id.clone())
            .collect()
    }

    /// Compare-and-set state change. Returns false without touching the task
    /// if its state is not `expected_from` or the edge is not allowed.
    pub fn transition_state(
        &self,
        id: &str,
        expected_from: TaskState,
        to: TaskState,
    ) -> Result<bool, StoreError> {
        let mut inner = self.inner.lock();
        let current = inner
            .tasks
            .get(id)
            .map(|task| task.state)
            .ok_or_else(|| StoreError::NotFound(id.to_string()))?;
        if current != expected_from || !is_valid_transition(expected_from, to) {
            return Ok(false);
        }
        let record = TransitionRecord {
            task_id: id.to_string(),
            from: expected_from,
            to,
        };
        inner.append(JournalEvent::State, id, serde_json::to_value(&record)?)?;
        inner.tasks.get_mut(id).expect("checked above").state = to;
        inner.transitions.push(record);
        Ok(true)
    }

    pub fn record_log(&self, id: &str, update: LogUpdate) -> Result<(), StoreError> {
        let mut inner = self.inner.lock();
        if !inner.tasks.contains_key(id) {
            return Err(StoreError::NotFound(id.to_string()));
        }
        inner.append(JournalEvent::Log, id, serde_json::to_value(&update)?)?;
        inner.apply_log(id, update, self.capture_limit);
        Ok(())
    }

    /// Every state change applied since the store was opened, in order.
    pub fn transitions(&self) -> Vec<TransitionRecord> {
        self.inner.lock().transitions.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn replay(inner: &mut Inner, record: JournalRecord, capture_limit: usize) {
    match record.event {
        JournalEvent::Created => {
            if let Ok(task) = serde_json::from_value::<Task>(record.payload) {
                inner.insert(task);
            }
        }
        JournalEvent::State => {
            if let Ok(change) = serde_json::from_value::<TransitionRecord>(record.payload) {
                if let Some(task) = inner.tasks.get_mut(&change.task_id) {
                    task.state = change.to;
                }
            }
        }
        JournalEvent::Log => {
            if let Ok(update) = serde_json::from_value::<LogUpdate>(record.payload) {
                inner.apply_log(&record.task_id, update, capture_limit);
            }
        }
    }
}

impl From<serde_json::Error> for StoreError {
    fn from(err: serde_json::Error) -> Self {
        StoreError::StorageUnavailable(err.into())
    }
}
