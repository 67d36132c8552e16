use std::io;
use std::path::{Path, PathBuf};

use crate::model::{normalize_task_path, Task};
use crate::staging::{sandbox_path, StagingError};

/// A task path made visible to executors, backed by a host directory under
/// the sandbox root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mount {
    pub task_path: String,
    pub host_path: PathBuf,
}

/// Per-task host directory that stands in for the executor's `/`.
#[derive(Debug)]
pub struct Sandbox {
    root: PathBuf,
    mounts: Vec<Mount>,
}

/// Directories shared by all executors: volumes, parents of every input and
/// output path, and `/tmp`. Nested entries are folded into their ancestor.
fn mount_points(task: &Task) -> Vec<String> {
    let mut points: Vec<Vec<&str>> = Vec::new();
    let io_paths = task.inputs.iter().chain(&task.outputs).map(|p| p.path.as_str());
    for path in io_paths {
        if let Ok(mut parts) = normalize_task_path(path) {
            parts.pop();
            points.push(parts);
        }
    }
    for volume in &task.volumes {
        if let Ok(parts) = normalize_task_path(volume) {
            points.push(parts);
        }
    }
    points.push(vec!["tmp"]);
    points.retain(|p| !p.is_empty());
    points.sort();
    points.dedup();

    let mut folded: Vec<Vec<&str>> = Vec::new();
    for point in points {
        if !folded.iter().any(|outer| point.starts_with(outer)) {
            folded.push(point);
        }
    }
    folded
        .into_iter()
        .map(|parts| format!("/{}", parts.join("/")))
        .collect()
}

impl Sandbox {
    /// Create an empty sandbox for `task` under `parent`, replacing any stale
    /// directory left from an earlier run.
    pub fn create(parent: &Path, task: &Task) -> io::Result<Sandbox> {
        let root = parent.join(&task.id);
        if root.exists() {
            std::fs::remove_dir_all(&root)?;
        }
        std::fs::create_dir_all(&root)?;
        let mut mounts = Vec::new();
        for task_path in mount_points(task) {
            let host_path = sandbox_path(&root, &task_path)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
            std::fs::create_dir_all(&host_path)?;
            mounts.push(Mount {
                task_path,
                host_path,
            });
        }
        Ok(Sandbox { root, mounts })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn mounts(&self) -> &[Mount] {
        &self.mounts
    }

    /// Host location of an absolute task path.
    pub fn host_path(&self, task_path: &str) -> Result<PathBuf, StagingError> {
        sandbox_path(&self.root, task_path)
    }

    pub fn remove(self) -> io::Result<()> {
        std::fs::remove_dir_all(&self.root)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Executor, IoParameter, TaskSpec};
    use chrono::Utc;

    fn task() -> Task {
        let spec = TaskSpec {
            inputs: vec![
                IoParameter::file("file:///x", "/data/in/a.txt"),
                IoParameter::file("file:///y", "/top.txt"),
            ],
            outputs: vec![IoParameter::file("file:///o", "/out/o.txt")],
            volumes: vec!["/data".into(), "/vol".into()],
            executors: vec![Executor::new("img", ["true"])],
            ..Default::default()
        };
        Task::new("sbtest".into(), spec, Utc::now())
    }

    #[test]
    fn mounts_fold_nested_and_skip_root() {
        assert_eq!(mount_points(&task()), vec!["/data", "/out", "/tmp", "/vol"]);
    }

    #[test]
    fn create_and_remove() {
        let parent = tempfile::tempdir().unwrap();
        let sandbox = Sandbox::create(parent.path(), &task()).unwrap();
        for mount in sandbox.mounts() {
            assert!(mount.host_path.is_dir());
            assert!(mount.host_path.starts_with(sandbox.root()));
        }
        assert_eq!(
            sandbox.host_path("/out/o.txt").unwrap(),
            sandbox.root().join("out/o.txt")
        );
        let root = sandbox.root().to_path_buf();
        sandbox.remove().unwrap();
        assert!(!root.exists());
    }
}
