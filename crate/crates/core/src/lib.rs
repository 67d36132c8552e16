//! Core of a GA4GH Task Execution Service: the task model, a task store,
//! storage staging, a local worker and the HTTP API.

pub mod model;
pub mod server;
pub mod staging;
pub mod store;
pub mod worker;

pub use model::{
    apply_view, is_terminal, is_valid_transition, validate_task_spec, Executor, ExecutorLog,
    IoKind, IoParameter, OutputFileLog, Resources, Task, TaskLog, TaskSpec, TaskState, TaskView,
    ValidationError,
};
pub use server::{ErrorBody, ListTasksResponse, ServerConfig, ServiceInfo};
pub use staging::{ProtocolHandler, Registry, StagingError, StorageUrl};
pub use store::{ListFilter, LogUpdate, Page, StoreError, TaskStore};
pub use worker::{Worker, WorkerConfig};
