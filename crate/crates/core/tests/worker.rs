mod common;

use std::time::{Duration, Instant};

use chrono::Utc;
use common::{process_with_marker, sh, spec_of, Harness};
use tes_core::model::{
    is_valid_transition, Executor, IoParameter, Resources, Task, TaskSpec, TaskState, TaskView,
};
use tes_core::worker::{Invocation, Sandbox};
use tokio_util::sync::CancellationToken;

fn task_of(spec: TaskSpec) -> Task {
    Task::new("direct".into(), spec, Utc::now())
}

#[tokio::test]
async fn echo_to_output_completes() {
    let h = Harness::new(2, 4);
    let dest = tempfile::tempdir().unwrap();
    let mut exec = sh("echo staged-output");
    exec.stdout = Some("/out/o.txt".into());
    let mut spec = spec_of(vec![exec]);
    let url = format!("file://{}/o.txt", dest.path().display());
    spec.outputs.push(IoParameter::file(url.clone(), "/out/o.txt"));
    let id = h.store().create_task(spec).unwrap();

    assert_eq!(h.worker.run_task(&id).await, TaskState::Complete);
    assert_eq!(
        std::fs::read_to_string(dest.path().join("o.txt")).unwrap(),
        "staged-output\n"
    );
    let task = h.store().get_task(&id, TaskView::Full).unwrap();
    let log = &task.logs[0];
    assert!(log.start_time.is_some() && log.end_time.is_some());
    assert_eq!(log.output_files.len(), 1);
    assert_eq!(log.output_files[0].url, url);
    assert_eq!(log.output_files[0].size_bytes, 14);
    assert_eq!(log.executor_logs[0].stdout_tail.as_deref(), Some("staged-output\n"));
    // sandbox is removed after finalization
    assert_eq!(std::fs::read_dir(h.sandboxes.path()).unwrap().count(), 0);
}

#[tokio::test]
async fn missing_input_is_system_error_before_any_executor() {
    let h = Harness::new(1, 1);
    let mut spec = spec_of(vec![sh("echo never")]);
    spec.inputs.push(IoParameter::file("file:///nonexistent/tes/input", "/in/x"));
    let id = h.store().create_task(spec).unwrap();
    assert_eq!(h.worker.run_task(&id).await, TaskState::SystemError);
    let task = h.store().get_task(&id, TaskView::Full).unwrap();
    assert!(task.logs[0].executor_logs.is_empty());
    assert!(task.logs[0].system_logs[0].contains("stage-in"));
}

#[tokio::test]
async fn non_zero_exit_is_executor_error() {
    let h = Harness::new(1, 1);
    let id = h.store().create_task(spec_of(vec![sh("exit 3")])).unwrap();
    assert_eq!(h.worker.run_task(&id).await, TaskState::ExecutorError);
    let task = h.store().get_task(&id, TaskView::Basic).unwrap();
    assert_eq!(task.logs[0].executor_logs[0].exit_code, Some(3));
}

#[tokio::test]
async fn unlaunchable_command_is_system_error() {
    let h = Harness::new(1, 1);
    let exec = Executor::new("img", ["/no/such/binary"]);
    let id = h.store().create_task(spec_of(vec![exec])).unwrap();
    assert_eq!(h.worker.run_task(&id).await, TaskState::SystemError);
    let task = h.store().get_task(&id, TaskView::Full).unwrap();
    assert!(task.logs[0].system_logs.iter().any(|l| l.contains("launch")));
}

#[tokio::test]
async fn failed_task_outputs_are_not_uploaded() {
    let h = Harness::new(1, 1);
    let dest = tempfile::tempdir().unwrap();
    let mut spec = spec_of(vec![sh("echo data > /out/f; exit 1")]);
    spec.outputs.push(IoParameter::file(
        format!("file://{}/f", dest.path().display()),
        "/out/f",
    ));
    let id = h.store().create_task(spec).unwrap();
    assert_eq!(h.worker.run_task(&id).await, TaskState::ExecutorError);
    assert!(!dest.path().join("f").exists());
}

#[tokio::test]
async fn undeclared_output_path_is_system_error() {
    let h = Harness::new(1, 1);
    let mut spec = spec_of(vec![sh("true")]);
    spec.outputs.push(IoParameter::file("file:///tmp/tes-never-written", "/out/missing"));
    let id = h.store().create_task(spec).unwrap();
    assert_eq!(h.worker.run_task(&id).await, TaskState::SystemError);
}

async fn run_exits(exits: [i32; 3], ignore: [bool; 3]) -> (bool, usize) {
    let h = Harness::new(1, 1);
    let executors = exits
        .iter()
        .zip(ignore)
        .map(|(code, ignore_error)| Executor {
            ignore_error,
            ..sh(&format!("exit {code}"))
        })
        .collect();
    let task = task_of(spec_of(executors));
    let sandbox = Sandbox::create(h.sandboxes.path(), &task).unwrap();
    let outcome = h
        .worker
        .run_executors(&task, &sandbox, &CancellationToken::new())
        .await
        .unwrap();
    (outcome.ok, outcome.logs.len())
}

#[tokio::test]
async fn failing_executor_ends_sequence_early() {
    assert_eq!(run_exits([0, 1, 0], [false; 3]).await, (false, 2));
}

#[tokio::test]
async fn ignore_error_continues_sequence() {
    assert_eq!(run_exits([0, 1, 0], [false, true, false]).await, (true, 3));
}

#[tokio::test]
async fn executors_share_volumes() {
    let h = Harness::new(1, 1);
    let mut spec = spec_of(vec![sh("echo shared > /vol/x"), sh("test \"$(cat /vol/x)\" = shared")]);
    spec.volumes.push("/vol".into());
    let task = task_of(spec);
    let sandbox = Sandbox::create(h.sandboxes.path(), &task).unwrap();
    let outcome = h
        .worker
        .run_executors(&task, &sandbox, &CancellationToken::new())
        .await
        .unwrap();
    assert!(outcome.ok);
    assert_eq!(outcome.logs[1].exit_code, Some(0));
}

#[tokio::test]
async fn single_executor_captures_stdout() {
    let h = Harness::new(1, 1);
    let exec = Executor::new("img", ["sh", "-c", "echo hi"]);
    let task = task_of(spec_of(vec![exec.clone()]));
    let sandbox = Sandbox::create(h.sandboxes.path(), &task).unwrap();
    let inv = Invocation { task_id: &task.id, index: 0, executor: &exec, sandbox: &sandbox };
    let log = h.worker.run_single_executor(&inv, &CancellationToken::new()).await.unwrap();
    assert_eq!(log.exit_code, Some(0));
    assert_eq!(log.stdout_tail.as_deref(), Some("hi\n"));
}

#[tokio::test]
async fn stdin_is_read_from_mapped_file() {
    let h = Harness::new(1, 1);
    let mut exec = Executor::new("img", ["cat"]);
    exec.stdin = Some("/in/data.txt".into());
    let mut spec = spec_of(vec![exec.clone()]);
    spec.inputs.push(IoParameter::inline("abc", "/in/data.txt"));
    let id = h.store().create_task(spec).unwrap();
    assert_eq!(h.worker.run_task(&id).await, TaskState::Complete);
    let task = h.store().get_task(&id, TaskView::Full).unwrap();
    assert_eq!(task.logs[0].executor_logs[0].stdout_tail.as_deref(), Some("abc"));
}

#[tokio::test]
async fn env_and_workdir_are_applied() {
    let h = Harness::new(1, 1);
    let mut exec = sh("printf '%s|%s' \"$GREETING\" \"$(basename \"$PWD\")\"");
    exec.env.insert("GREETING".into(), "hola".into());
    exec.workdir = Some("/work/dir".into());
    let id = h.store().create_task(spec_of(vec![exec])).unwrap();
    assert_eq!(h.worker.run_task(&id).await, TaskState::Complete);
    let task = h.store().get_task(&id, TaskView::Full).unwrap();
    assert_eq!(task.logs[0].executor_logs[0].stdout_tail.as_deref(), Some("hola|dir"));
}

#[tokio::test]
async fn cancel_interrupts_single_executor() {
    let h = Harness::new(1, 1);
    let exec = Executor::new("img", ["sleep", "60"]);
    let task = task_of(spec_of(vec![exec.clone()]));
    let sandbox = Sandbox::create(h.sandboxes.path(), &task).unwrap();
    let cancel = CancellationToken::new();
    let trigger = cancel.clone();
    tokio::spawn(async move {
        tokio::time::sleep(Duration::from_millis(300)).await;
        trigger.cancel();
    });
    let started = Instant::now();
    let inv = Invocation { task_id: &task.id, index: 0, executor: &exec, sandbox: &sandbox };
    let log = h.worker.run_single_executor(&inv, &cancel).await.unwrap();
    assert!(started.elapsed() < Duration::from_secs(6));
    assert_eq!(log.exit_code, None);
}

#[tokio::test]
async fn cancel_queued_task() {
    let h = Harness::new(1, 1);
    let id = h.store().create_task(spec_of(vec![sh("echo never")])).unwrap();
    assert!(h.worker.cancel_task(&id).unwrap());
    assert_eq!(h.store().state(&id).unwrap(), TaskState::Canceled);
    // a late run attempt must not execute it
    assert_eq!(h.worker.run_task(&id).await, TaskState::Canceled);
    assert!(h.store().get_task(&id, TaskView::Full).unwrap().logs.is_empty());
}

#[tokio::test]
async fn cancel_running_task() {
    let h = Harness::new(1, 1);
    let marker = format!("59.{}", std::process::id());
    let id = h
        .store()
        .create_task(spec_of(vec![Executor::new("img", ["sleep", marker.as_str()])]))
        .unwrap();
    let worker = h.worker.clone();
    let run_id = id.clone();
    let run = tokio::spawn(async move { worker.run_task(&run_id).await });
    while h.store().state(&id).unwrap() != TaskState::Running || !process_with_marker(&marker) {
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    let started = Instant::now();
    h.worker.cancel_task(&id).unwrap();
    assert_eq!(h.store().state(&id).unwrap(), TaskState::Canceling);
    assert_eq!(run.await.unwrap(), TaskState::Canceled);
    assert!(started.elapsed() < Duration::from_secs(7));
    assert!(!process_with_marker(&marker));

    let states: Vec<_> = h.store().transitions().into_iter().map(|t| t.to).collect();
    assert_eq!(
        states,
        vec![TaskState::Initializing, TaskState::Running, TaskState::Canceling, TaskState::Canceled]
    );
}

#[tokio::test]
async fn cancel_terminal_task_is_noop() {
    let h = Harness::new(1, 1);
    let id = h.store().create_task(spec_of(vec![sh("true")])).unwrap();
    assert_eq!(h.worker.run_task(&id).await, TaskState::Complete);
    for _ in 0..2 {
        assert!(h.worker.cancel_task(&id).unwrap());
        assert_eq!(h.store().state(&id).unwrap(), TaskState::Complete);
    }
    assert!(h.worker.cancel_task("unknown").is_err());
}

#[tokio::test]
async fn background_children_do_not_survive() {
    let h = Harness::new(1, 1);
    let marker = format!("58.{}", std::process::id());
    let id = h
        .store()
        .create_task(spec_of(vec![sh(&format!("sleep {marker} & echo started"))]))
        .unwrap();
    assert_eq!(h.worker.run_task(&id).await, TaskState::Complete);
    tokio::time::sleep(Duration::from_millis(100)).await;
    assert!(!process_with_marker(&marker));
}

fn cores(n: i64, script: &str) -> TaskSpec {
    TaskSpec {
        resources: Some(Resources { cpu_cores: Some(n), ram_gb: Some(0.5), ..Default::default() }),
        ..spec_of(vec![sh(script)])
    }
}

#[tokio::test]
async fn scheduler_respects_capacity() {
    let h = Harness::new(8, 4);
    let ids: Vec<_> = (0..3)
        .map(|_| h.store().create_task(cores(2, "sleep 1")).unwrap())
        .collect();
    h.worker.start();

    // wait for the first admissions
    let deadline = Instant::now() + Duration::from_secs(5);
    while h.worker.running() < 2 && Instant::now() < deadline {
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    let mut max_in_use = 0;
    let mut third_waited = false;
    while ids.iter().any(|id| !h.store().state(id).unwrap().is_terminal()) {
        let in_use = h.worker.capacity().in_use_cpu_cores();
        max_in_use = max_in_use.max(in_use);
        let queued = ids
            .iter()
            .filter(|id| h.store().state(id).unwrap() == TaskState::Queued)
            .count();
        if queued == 1 && h.worker.running() == 2 {
            third_waited = true;
        }
        assert!(h.worker.running() <= 2);
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    assert!(third_waited);
    assert_eq!(max_in_use, 4);
    for id in &ids {
        assert_eq!(h.store().state(id).unwrap(), TaskState::Complete);
    }
    tokio::time::sleep(Duration::from_millis(50)).await;
    assert_eq!(h.worker.capacity().in_use_cpu_cores(), 0);
}

#[tokio::test]
async fn oversized_task_stays_queued() {
    let h = Harness::new(2, 4);
    let big = h.store().create_task(cores(8, "true")).unwrap();
    let small = h.store().create_task(cores(1, "true")).unwrap();
    h.worker.start();
    assert_eq!(h.wait(&small, Duration::from_secs(5)).await, TaskState::Complete);
    tokio::time::sleep(Duration::from_millis(200)).await;
    assert_eq!(h.store().state(&big).unwrap(), TaskState::Queued);
    assert_eq!(h.worker.capacity().in_use_cpu_cores(), 0);
}

#[tokio::test]
async fn mixed_workload_audit() {
    let h = Harness::new(4, 4);
    let scripts = ["true", "exit 2", "sleep 0.2", "echo x >&2"];
    let mut ids: Vec<_> = scripts
        .iter()
        .map(|s| h.store().create_task(spec_of(vec![sh(s), sh("true")])).unwrap())
        .collect();
    let mut bad = spec_of(vec![sh("true")]);
    bad.inputs.push(IoParameter::file("file:///nope/x", "/in/x"));
    ids.push(h.store().create_task(bad).unwrap());
    h.worker.start();
    for id in &ids {
        assert!(h.wait(id, Duration::from_secs(10)).await.is_terminal());
    }
    for t in h.store().transitions() {
        assert!(is_valid_transition(t.from, t.to), "{t:?}");
    }
    for id in &ids {
        let task = h.store().get_task(id, TaskView::Full).unwrap();
        let logs = task.logs[0].executor_logs.len();
        assert!(logs <= task.executors.len());
        assert_eq!(logs == task.executors.len(), task.state == TaskState::Complete, "{id}");
    }
    tokio::time::sleep(Duration::from_millis(50)).await;
    assert_eq!(h.worker.capacity().in_use_cpu_cores(), 0);
}

#[tokio::test]
async fn recover_finalizes_interrupted_tasks() {
    let h = Harness::new(1, 1);
    let running = h.store().create_task(spec_of(vec![sh("true")])).unwrap();
    let canceling = h.store().create_task(spec_of(vec![sh("true")])).unwrap();
    for id in [&running, &canceling] {
        h.store().transition_state(id, TaskState::Queued, TaskState::Initializing).unwrap();
        h.store().transition_state(id, TaskState::Initializing, TaskState::Running).unwrap();
    }
    h.store().transition_state(&canceling, TaskState::Running, TaskState::Canceling).unwrap();
    assert_eq!(h.worker.recover().unwrap(), 2);
    assert_eq!(h.store().state(&running).unwrap(), TaskState::SystemError);
    assert_eq!(h.store().state(&canceling).unwrap(), TaskState::Canceled);
}
