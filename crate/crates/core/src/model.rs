//! TES domain types, task-spec validation, detail views and the task
//! lifecycle state machine.
//!
//! Everything here is a plain value type. Wire serialization is JSON with
//! snake_case field names; absent optional fields are omitted rather than
//! emitted as `null`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

/// Lifecycle state of a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskState {
    Unknown,
    Queued,
    Initializing,
    Running,
    Paused,
    Complete,
    ExecutorError,
    SystemError,
    Canceling,
    Canceled,
    Preempted,
}

impl TaskState {
    pub const ALL: [TaskState; 11] = [
        TaskState::Unknown,
        TaskState::Queued,
        TaskState::Initializing,
        TaskState::Running,
        TaskState::Paused,
        TaskState::Complete,
        TaskState::ExecutorError,
        TaskState::SystemError,
        TaskState::Canceling,
        TaskState::Canceled,
        TaskState::Preempted,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskState::Unknown => "UNKNOWN",
            TaskState::Queued => "QUEUED",
            TaskState::Initializing => "INITIALIZING",
            TaskState::Running => "RUNNING",
            TaskState::Paused => "PAUSED",
            TaskState::Complete => "COMPLETE",
            TaskState::ExecutorError => "EXECUTOR_ERROR",
            TaskState::SystemError => "SYSTEM_ERROR",
            TaskState::Canceling => "CANCELING",
            TaskState::Canceled => "CANCELED",
            TaskState::Preempted => "PREEMPTED",
        }
    }

    pub fn is_terminal(self) -> bool {
        is_terminal(self)
    }
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown value `{0}`")]
pub struct ParseEnumError(pub String);

impl FromStr for TaskState {
    type Err = ParseEnumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskState::ALL
            .into_iter()
            .find(|state| state.as_str() == s)
            .ok_or_else(|| ParseEnumError(s.to_string()))
    }
}

/// True iff no transition may leave `state`.
pub fn is_terminal(state: TaskState) -> bool {
    matches!(
        state,
        TaskState::Complete
            | TaskState::ExecutorError
            | TaskState::SystemError
            | TaskState::Canceled
            | TaskState::Preempted
    )
}

/// The lifecycle edge relation. Every state change in the store must be an
/// edge for which this returns true.
pub fn is_valid_transition(from: TaskState, to: TaskState) -> bool {
    use TaskState::*;
    matches!(
        (from, to),
        (Queued, Initializing | Canceling | Canceled | SystemError)
            | (Initializing, Running | Canceling | SystemError)
            | (Running, Complete | ExecutorError | SystemError | Canceling)
            | (Canceling, Canceled)
    )
}

/// Level of detail for task responses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskView {
    #[default]
    Minimal,
    Basic,
    Full,
}

impl TaskView {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskView::Minimal => "MINIMAL",
            TaskView::Basic => "BASIC",
            TaskView::Full => "FULL",
        }
    }
}

impl fmt::Display for TaskView {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskView {
    type Err = ParseEnumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "MINIMAL" => Ok(TaskView::Minimal),
            "BASIC" => Ok(TaskView::Basic),
            "FULL" => Ok(TaskView::Full),
            other => Err(ParseEnumError(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IoKind {
    #[default]
    File,
    Directory,
}

fn is_default<T: Default + PartialEq>(value: &T) -> bool {
    *value == T::default()
}

/// An input or output mapping between a storage URL and a sandbox path.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoParameter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    /// Storage URL. May be empty for inputs that carry inline `content`.
    #[serde(default)]
    pub url: String,
    /// Absolute path inside the task's filesystem.
    pub path: String,
    #[serde(rename = "type", alias = "kind", default)]
    pub kind: IoKind,
    /// Inline file body, inputs only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content: Option<String>,
}

impl IoParameter {
    pub fn file(url: impl Into<String>, path: impl Into<String>) -> Self {
        IoParameter {
            url: url.into(),
            path: path.into(),
            ..Default::default()
        }
    }

    pub fn directory(url: impl Into<String>, path: impl Into<String>) -> Self {
        IoParameter {
            url: url.into(),
            path: path.into(),
            kind: IoKind::Directory,
            ..Default::default()
        }
    }

    pub fn inline(content: impl Into<String>, path: impl Into<String>) -> Self {
        IoParameter {
            path: path.into(),
            content: Some(content.into()),
            ..Default::default()
        }
    }
}

/// Requested compute resources. GPU requests travel in `backend_parameters`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Resources {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cpu_cores: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ram_gb: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disk_gb: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preemptible: Option<bool>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub zones: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub backend_parameters: BTreeMap<String, String>,
}

/// One command-line invocation within a task.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Executor {
    /// Container image reference; interpretation is up to the runtime adapter.
    #[serde(default)]
    pub image: String,
    #[serde(default)]
    pub command: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workdir: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stdin: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stdout: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stderr: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub env: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "is_default")]
    pub ignore_error: bool,
}

impl Executor {
    pub fn new<I, S>(image: impl Into<String>, command: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Executor {
            image: image.into(),
            command: command.into_iter().map(Into::into).collect(),
            ..Default::default()
        }
    }
}

/// What a client submits: everything about a task except server-assigned
/// fields.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<IoParameter>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub outputs: Vec<IoParameter>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resources: Option<Resources>,
    #[serde(default)]
    pub executors: Vec<Executor>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub volumes: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tags: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExecutorLog {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_time: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_time: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stdout_tail: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stderr_tail: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<i32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFileLog {
    pub url: String,
    pub path: String,
    pub size_bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskLog {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_time: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_time: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub executor_logs: Vec<ExecutorLog>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub output_files: Vec<OutputFileLog>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub system_logs: Vec<String>,
}

/// A stored task: the submitted spec plus server-assigned identity, state
/// and logs. Under a reduced view most fields are empty and therefore
/// omitted from the wire form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub state: TaskState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<IoParameter>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub outputs: Vec<IoParameter>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resources: Option<Resources>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub executors: Vec<Executor>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub volumes: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tags: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub creation_time: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub logs: Vec<TaskLog>,
}

impl Task {
    pub fn new(id: String, spec: TaskSpec, creation_time: DateTime<Utc>) -> Self {
        Task {
            id,
            state: TaskState::Queued,
            name: spec.name,
            description: spec.description,
            inputs: spec.inputs,
            outputs: spec.outputs,
            resources: spec.resources,
            executors: spec.executors,
            volumes: spec.volumes,
            tags: spec.tags,
            creation_time: Some(creation_time),
            logs: Vec::new(),
        }
    }

    /// The client-supplied part of the task.
    pub fn spec(&self) -> TaskSpec {
        TaskSpec {
            name: self.name.clone(),
            description: self.description.clone(),
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
            resources: self.resources.clone(),
            executors: self.executors.clone(),
            volumes: self.volumes.clone(),
            tags: self.tags.clone(),
        }
    }

    fn minimal(&self) -> Task {
        Task {
            id: self.id.clone(),
            state: self.state,
            name: None,
            description: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            resources: None,
            executors: Vec::new(),
            volumes: Vec::new(),
            tags: BTreeMap::new(),
            creation_time: None,
            logs: Vec::new(),
        }
    }
}

/// Project a task through a detail view.
///
/// `MINIMAL` keeps only `id` and `state`. `BASIC` drops executor
/// stdout/stderr tails, inline input content and system logs. `FULL` is the
/// identity.
pub fn apply_view(task: &Task, view: TaskView) -> Task {
    match view {
        TaskView::Minimal => task.minimal(),
        TaskView::Basic => {
            let mut task = task.clone();
            for input in &mut task.inputs {
                input.content = None;
            }
            for log in &mut task.logs {
                log.system_logs.clear();
                for exec in &mut log.executor_logs {
                    exec.stdout_tail = None;
                    exec.stderr_tail = None;
                }
            }
            task
        }
        TaskView::Full => task.clone(),
    }
}

/// One violated invariant of a submitted task spec.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationError {
    /// Path of the offending field, e.g. `executors[0].command`.
    pub field: String,
    pub message: String,
}

impl ValidationError {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        ValidationError {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Reasons a task path cannot be mapped into a sandbox.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskPathError {
    NotAbsolute,
    EscapesRoot,
}

impl fmt::Display for TaskPathError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskPathError::NotAbsolute => f.write_str("must be an absolute path"),
            TaskPathError::EscapesRoot => f.write_str("must not escape the filesystem root"),
        }
    }
}

/// Lexically normalize an absolute task path into its components.
///
/// `.` and empty components are dropped; `..` pops, and popping past the
/// root is an error rather than being clamped.
pub fn normalize_task_path(path: &str) -> Result<Vec<&str>, TaskPathError> {
    let rest = path.strip_prefix('/').ok_or(TaskPathError::NotAbsolute)?;
    let mut parts = Vec::new();
    for part in rest.split('/') {
        match part {
            "" | "." => {}
            ".." => {
                parts.pop().ok_or(TaskPathError::EscapesRoot)?;
            }
            other => parts.push(other),
        }
    }
    Ok(parts)
}

fn check_path(errors: &mut Vec<ValidationError>, field: String, path: &str) {
    if let Err(err) = normalize_task_path(path) {
        errors.push(ValidationError::new(field, err.to_string()));
    }
}

/// Check every invariant of a task spec. An empty result means the spec is
/// admissible.
pub fn validate_task_spec(spec: &TaskSpec) -> Vec<ValidationError> {
    let mut errors = Vec::new();

    if spec.executors.is_empty() {
        errors.push(ValidationError::new("executors", "must be non-empty"));
    }
    for (i, exec) in spec.executors.iter().enumerate() {
        if exec.command.is_empty() {
            errors.push(ValidationError::new(
                format!("executors[{i}].command"),
                "must be non-empty",
            ));
        }
        let stdio = [
            ("workdir", &exec.workdir),
            ("stdin", &exec.stdin),
            ("stdout", &exec.stdout),
            ("stderr", &exec.stderr),
        ];
        for (name, value) in stdio {
            if let Some(path) = value {
                check_path(&mut errors, format!("executors[{i}].{name}"), path);
            }
        }
    }

    for (i, input) in spec.inputs.iter().enumerate() {
        check_path(&mut errors, format!("inputs[{i}].path"), &input.path);
        match (input.url.is_empty(), input.content.is_some()) {
            (true, false) => errors.push(ValidationError::new(
                format!("inputs[{i}]"),
                "url or content required",
            )),
            (false, true) => errors.push(ValidationError::new(
                format!("inputs[{i}]"),
                "url and content are mutually exclusive",
            )),
            _ => {}
        }
        if input.content.is_some() && input.kind == IoKind::Directory {
            errors.push(ValidationError::new(
                format!("inputs[{i}].type"),
                "inline content requires type FILE",
            ));
        }
    }

    for (i, output) in spec.outputs.iter().enumerate() {
        check_path(&mut errors, format!("outputs[{i}].path"), &output.path);
        if output.url.is_empty() {
            errors.push(ValidationError::new(
                format!("outputs[{i}].url"),
                "must be non-empty",
            ));
        }
        if output.content.is_some() {
            errors.push(ValidationError::new(
                format!("outputs[{i}].content"),
                "not allowed on outputs",
            ));
        }
    }

    for (i, volume) in spec.volumes.iter().enumerate() {
        check_path(&mut errors, format!("volumes[{i}]"), volume);
    }

    if let Some(res) = &spec.resources {
        if matches!(res.cpu_cores, Some(n) if n <= 0) {
            errors.push(ValidationError::new("resources.cpu_cores", "must be positive"));
        }
        let reals = [("ram_gb", res.ram_gb), ("disk_gb", res.disk_gb)];
        for (name, value) in reals {
            if matches!(value, Some(v) if !(v > 0.0 && v.is_finite())) {
                errors.push(ValidationError::new(
                    format!("resources.{name}"),
                    "must be positive",
                ));
            }
        }
    }

    errors
}
