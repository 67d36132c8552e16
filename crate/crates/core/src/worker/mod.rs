//! Task execution: admission against node capacity, sandbox preparation,
//! stage-in, sequential executors, stage-out and finalization, with
//! cooperative cancellation at every stage.

mod capacity;
mod runtime;
mod sandbox;

pub use capacity::{Capacity, Reservation};
pub use runtime::{
    rewrite_task_paths, supervise, AdapterError, ContainerAdapter, DirectAdapter, Invocation,
    ProcessOutcome, RuntimeAdapter, StdioPlan, TailBuffer,
};
pub use sandbox::{Mount, Sandbox};

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use chrono::Utc;
use parking_lot::Mutex;
use tokio::sync::Notify;
use tokio::task::JoinHandle;
use tokio_util::sync::CancellationToken;

use crate::model::{is_terminal, Executor, ExecutorLog, Task, TaskState, TaskView};
use crate::staging::{stage_input, stage_output, Registry};
use crate::store::{ListFilter, LogUpdate, StoreError, TaskStore, DEFAULT_CAPTURE_LIMIT};

#[derive(Debug, Clone)]
pub struct WorkerConfig {
    /// Maximum number of tasks running at once.
    pub pool_size: usize,
    pub total_cpu_cores: u64,
    pub total_ram_gb: f64,
    /// Per-task sandboxes are created below this directory.
    pub sandbox_parent: PathBuf,
    /// Bytes of stdout/stderr kept per executor.
    pub capture_limit: usize,
    /// Keep sandboxes after finalization for debugging.
    pub retain_sandboxes: bool,
    pub poll_interval: Duration,
    /// Time between SIGTERM and SIGKILL on cancellation.
    pub kill_grace: Duration,
}

impl Default for WorkerConfig {
    fn default() -> Self {
        let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
        WorkerConfig {
            pool_size: cores,
            total_cpu_cores: cores as u64,
            total_ram_gb: 8.0,
            sandbox_parent: std::env::temp_dir().join("tes-sandboxes"),
            capture_limit: DEFAULT_CAPTURE_LIMIT,
            retain_sandboxes: false,
            poll_interval: Duration::from_millis(250),
            kill_grace: Duration::from_secs(5),
        }
    }
}

/// Result of running a task's executor list.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutorsOutcome {
    /// No executor failed without `ignore_error`.
    pub ok: bool,
    pub canceled: bool,
    pub logs: Vec<ExecutorLog>,
}

struct LiveTask {
    cancel: CancellationToken,
    reservation: Option<Reservation>,
}

pub struct Worker {
    store: Arc<TaskStore>,
    registry: Arc<Registry>,
    adapter: Arc<dyn RuntimeAdapter>,
    capacity: Capacity,
    config: WorkerConfig,
    live: Mutex<HashMap<String, LiveTask>>,
    slot_freed: Notify,
    shutdown: CancellationToken,
}

enum Stop {
    Canceled,
    Failed(TaskState, String),
}

impl Worker {
    pub fn new(
        store: Arc<TaskStore>,
        registry: Arc<Registry>,
        adapter: Arc<dyn RuntimeAdapter>,
        config: WorkerConfig,
    ) -> Arc<Self> {
        Arc::new(Worker {
            capacity: Capacity::new(config.total_cpu_cores, config.total_ram_gb),
            store,
            registry,
            adapter,
            config,
            live: Mutex::new(HashMap::new()),
            slot_freed: Notify::new(),
            shutdown: CancellationToken::new(),
        })
    }

    pub fn store(&self) -> &Arc<TaskStore> {
        &self.store
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn capacity(&self) -> &Capacity {
        &self.capacity
    }

    pub fn config(&self) -> &WorkerConfig {
        &self.config
    }

    /// Number of admitted tasks that have not finalized yet.
    pub fn running(&self) -> usize {
        self.live.lock().len()
    }

    /// Finalize tasks left mid-flight by a previous process: anything that
    /// was initializing or running becomes SYSTEM_ERROR, and pending cancels
    /// complete.
    pub fn recover(&self) -> Result<usize, StoreError> {
        let mut recovered = 0;
        for (state, to) in [
            (TaskState::Initializing, TaskState::SystemError),
            (TaskState::Running, TaskState::SystemError),
            (TaskState::Canceling, TaskState::Canceled),
        ] {
            let filter = ListFilter {
                state: Some(state),
                ..Default::default()
            };
            let mut token = None;
            loop {
                let page = self.store.list_tasks(
                    &filter,
                    crate::store::MAX_PAGE_SIZE,
                    token.as_deref(),
                    TaskView::Minimal,
                )?;
                for task in &page.items {
                    if to == TaskState::SystemError {
                        self.store.record_log(
                            &task.id,
                            LogUpdate::System {
                                line: "task interrupted by server restart".into(),
                            },
                        )?;
                    }
                    if self.store.transition_state(&task.id, state, to)? {
                        recovered += 1;
                    }
                }
                token = page.next_page_token;
                if token.is_none() {
                    break;
                }
            }
        }
        Ok(recovered)
    }

    /// Start the scheduling loop: admit QUEUED tasks oldest first whenever a
    /// pool slot and capacity are free.
    pub fn start(self: &Arc<Self>) -> JoinHandle<()> {
        let worker = self.clone();
        tokio::spawn(async move {
            loop {
                worker.schedule_once();
                tokio::select! {
                    _ = worker.shutdown.cancelled() => break,
                    _ = tokio::time::sleep(worker.config.poll_interval) => {}
                    _ = worker.store.task_created() => {}
                    _ = worker.slot_freed.notified() => {}
                }
            }
        })
    }

    /// One scheduling pass. Tasks that do not fit are skipped so smaller
    /// ones behind them can still start.
    pub fn schedule_once(self: &Arc<Self>) -> usize {
        let mut started = 0;
        for id in self.store.queued() {
            if self.shutdown.is_cancelled() || self.running() >= self.config.pool_size.max(1) {
                break;
            }
            if self.live.lock().contains_key(&id) {
                continue;
            }
            let Ok(task) = self.store.get_task(&id, TaskView::Full) else {
                continue;
            };
            let reservation = Reservation::for_resources(task.resources.as_ref());
            if !self.capacity.admit(reservation) {
                continue;
            }
            self.live.lock().insert(
                id.clone(),
                LiveTask {
                    cancel: CancellationToken::new(),
                    reservation: Some(reservation),
                },
            );
            started += 1;
            let worker = self.clone();
            tokio::spawn(async move {
                worker.run_task(&id).await;
            });
        }
        started
    }

    /// Drive one QUEUED task to a terminal state and return that state.
    pub async fn run_task(&self, id: &str) -> TaskState {
        let cancel = {
            let mut live = self.live.lock();
            live.entry(id.to_string())
                .or_insert_with(|| LiveTask {
                    cancel: CancellationToken::new(),
                    reservation: None,
                })
                .cancel
                .clone()
        };
        let state = self.execute(id, &cancel).await;
        if let Some(entry) = self.live.lock().remove(id) {
            if let Some(reservation) = entry.reservation {
                self.capacity.release(reservation);
            }
        }
        self.slot_freed.notify_waiters();
        state
    }

    async fn execute(&self, id: &str, cancel: &CancellationToken) -> TaskState {
        match self
            .store
            .transition_state(id, TaskState::Queued, TaskState::Initializing)
        {
            Ok(true) => {}
            Ok(false) => return self.store.state(id).unwrap_or(TaskState::Unknown),
            Err(err) => {
                tracing::error!(task = id, %err, "cannot start task");
                return TaskState::Unknown;
            }
        }
        let task = match self.store.get_task(id, TaskView::Full) {
            Ok(task) => task,
            Err(err) => {
                tracing::error!(task = id, %err, "task vanished");
                return TaskState::Unknown;
            }
        };
        self.log(id, LogUpdate::Started { at: Utc::now() });

        let sandbox = match Sandbox::create(&self.config.sandbox_parent, &task) {
            Ok(sandbox) => sandbox,
            Err(err) => {
                return self.finalize(
                    id,
                    TaskState::Initializing,
                    Err(Stop::Failed(
                        TaskState::SystemError,
                        format!("sandbox creation failed: {err}"),
                    )),
                )
            }
        };

        let result = self.pipeline(&task, &sandbox, cancel).await;
        let from = self.store.state(id).unwrap_or(TaskState::Unknown);
        let state = self.finalize(id, from, result);

        if !self.config.retain_sandboxes {
            if let Err(err) = sandbox.remove() {
                tracing::warn!(task = id, %err, "could not remove sandbox");
            }
        }
        state
    }

    async fn pipeline(
        &self,
        task: &Task,
        sandbox: &Sandbox,
        cancel: &CancellationToken,
    ) -> Result<(), Stop> {
        for input in &task.inputs {
            if cancel.is_cancelled() {
                return Err(Stop::Canceled);
            }
            stage_input(&self.registry, input, sandbox.root())
                .await
                .map_err(|err| {
                    Stop::Failed(
                        TaskState::SystemError,
                        format!("stage-in of {} failed: {err}", input.path),
                    )
                })?;
        }
        if cancel.is_cancelled()
            || !self
                .store
                .transition_state(&task.id, TaskState::Initializing, TaskState::Running)
                .unwrap_or(false)
        {
            return Err(Stop::Canceled);
        }

        let outcome = self
            .run_executors(task, sandbox, cancel)
            .await
            .map_err(|err| Stop::Failed(TaskState::SystemError, err.to_string()))?;
        if outcome.canceled {
            return Err(Stop::Canceled);
        }
        if !outcome.ok {
            return Err(Stop::Failed(
                TaskState::ExecutorError,
                format!(
                    "executor {} exited with a non-zero status",
                    outcome.logs.len() - 1
                ),
            ));
        }

        let mut files = Vec::new();
        for output in &task.outputs {
            if cancel.is_cancelled() {
                return Err(Stop::Canceled);
            }
            let logs = stage_output(&self.registry, output, sandbox.root())
                .await
                .map_err(|err| {
                    Stop::Failed(
                        TaskState::SystemError,
                        format!("stage-out of {} failed: {err}", output.path),
                    )
                })?;
            files.extend(logs);
        }
        if !files.is_empty() {
            self.log(&task.id, LogUpdate::OutputFiles { files });
        }
        Ok(())
    }

    /// Record the end time and move to the terminal state. If a cancel
    /// request raced ahead, the task ends CANCELED instead.
    fn finalize(&self, id: &str, from: TaskState, result: Result<(), Stop>) -> TaskState {
        let target = match result {
            Ok(()) => TaskState::Complete,
            Err(Stop::Canceled) => TaskState::Canceled,
            Err(Stop::Failed(state, line)) => {
                self.log(id, LogUpdate::System { line });
                state
            }
        };
        self.log(id, LogUpdate::Ended { at: Utc::now() });

        let mut from = from;
        loop {
            if is_terminal(from) {
                return from;
            }
            let to = if from == TaskState::Canceling {
                TaskState::Canceled
            } else {
                target
            };
            match self.store.transition_state(id, from, to) {
                Ok(true) => return to,
                Ok(false) => {}
                Err(_) => return TaskState::Unknown,
            }
            let now = self.store.state(id).unwrap_or(TaskState::Unknown);
            if now == from {
                // not a legal edge from here; leave the task where it is
                tracing::error!(task = id, %from, %to, "cannot finalize task");
                return now;
            }
            from = now;
        }
    }

    /// Run executors in order, stopping at the first failure that is not
    /// covered by `ignore_error`. Each log is recorded as it completes.
    pub async fn run_executors(
        &self,
        task: &Task,
        sandbox: &Sandbox,
        cancel: &CancellationToken,
    ) -> Result<ExecutorsOutcome, AdapterError> {
        let mut logs = Vec::new();
        for (index, executor) in task.executors.iter().enumerate() {
            if cancel.is_cancelled() {
                return Ok(ExecutorsOutcome {
                    ok: false,
                    canceled: true,
                    logs,
                });
            }
            let started = Utc::now();
            self.log(
                &task.id,
                LogUpdate::Executor {
                    index,
                    log: ExecutorLog {
                        start_time: Some(started),
                        ..Default::default()
                    },
                },
            );
            let invocation = Invocation {
                task_id: &task.id,
                index,
                executor,
                sandbox,
            };
            let log = self.run_single_executor(&invocation, cancel).await?;
            self.log(
                &task.id,
                LogUpdate::Executor {
                    index,
                    log: log.clone(),
                },
            );
            let exit = log.exit_code;
            logs.push(log);
            match exit {
                None => {
                    return Ok(ExecutorsOutcome {
                        ok: false,
                        canceled: true,
                        logs,
                    })
                }
                Some(0) => {}
                Some(_) if executor.ignore_error => {}
                Some(_) => {
                    return Ok(ExecutorsOutcome {
                        ok: false,
                        canceled: false,
                        logs,
                    })
                }
            }
        }
        Ok(ExecutorsOutcome {
            ok: true,
            canceled: false,
            logs,
        })
    }

    /// Launch one executor through the runtime adapter and wait for it.
    /// A canceled executor reports no exit code.
    pub async fn run_single_executor(
        &self,
        invocation: &Invocation<'_>,
        cancel: &CancellationToken,
    ) -> Result<ExecutorLog, AdapterError> {
        let exec: &Executor = invocation.executor;
        let map = |path: &Option<String>| -> Result<Option<PathBuf>, AdapterError> {
            path.as_deref()
                .map(|p| invocation.sandbox.host_path(p))
                .transpose()
                .map_err(|e| AdapterError::Io(e.to_string()))
        };
        let stdio = StdioPlan {
            stdin: map(&exec.stdin)?,
            stdout: map(&exec.stdout)?,
            stderr: map(&exec.stderr)?,
        };
        let start_time = Utc::now();
        let cmd = self.adapter.prepare(invocation)?;
        let outcome = supervise(
            cmd,
            &stdio,
            self.config.capture_limit,
            cancel,
            self.config.kill_grace,
        )
        .await?;
        if outcome.canceled {
            self.adapter.cleanup(invocation).await;
        }
        Ok(ExecutorLog {
            start_time: Some(start_time),
            end_time: Some(Utc::now()),
            stdout_tail: Some(outcome.stdout_tail),
            stderr_tail: Some(outcome.stderr_tail),
            exit_code: outcome.exit_code,
        })
    }

    /// Request cancellation. QUEUED tasks are canceled at once; active
    /// tasks move to CANCELING and their running stage is interrupted.
    /// Terminal tasks are left alone. Always succeeds for a known id.
    pub fn cancel_task(&self, id: &str) -> Result<bool, StoreError> {
        loop {
            let state = self.store.state(id)?;
            let done = match state {
                TaskState::Queued => {
                    self.store
                        .transition_state(id, state, TaskState::Canceled)?
                }
                TaskState::Initializing | TaskState::Running => {
                    self.store
                        .transition_state(id, state, TaskState::Canceling)?
                }
                _ => true,
            };
            if done {
                break;
            }
        }
        if let Some(live) = self.live.lock().get(id) {
            live.cancel.cancel();
        }
        Ok(true)
    }

    /// Stop scheduling, cancel everything in flight and wait for it to
    /// finalize.
    pub async fn shutdown(&self, timeout: Duration) {
        self.shutdown.cancel();
        let ids: Vec<String> = self.live.lock().keys().cloned().collect();
        for id in ids {
            let _ = self.cancel_task(&id);
        }
        let deadline = tokio::time::Instant::now() + timeout;
        while self.running() > 0 && tokio::time::Instant::now() < deadline {
            tokio::time::sleep(Duration::from_millis(50)).await;
        }
    }

    fn log(&self, id: &str, update: LogUpdate) {
        if let Err(err) = self.store.record_log(id, update) {
            tracing::error!(task = id, %err, "failed to record log");
        }
    }
}
