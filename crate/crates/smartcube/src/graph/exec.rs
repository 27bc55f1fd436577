//! Worker-pool execution of task graphs. Tasks run layer by layer in id
//! order; results are independent of the worker count because every
//! registered op is a pure function of (params, dep results).

use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::graph::{TaskGraph, TaskId, TaskValue};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskStatus {
    Ok,
    Failed,
    /// Not attempted because a transitive dependency failed.
    Skipped,
}

#[derive(Debug, Clone)]
pub struct TaskOutcome {
    pub status: TaskStatus,
    pub duration: Duration,
    /// Op error rendered as text; present iff status is Failed.
    pub error: Option<String>,
}

/// Summary of one executor run.
#[derive(Debug, Clone, Default)]
pub struct ExecReport {
    pub workers: usize,
    pub outcomes: BTreeMap<TaskId, TaskOutcome>,
    pub tasks_completed: u64,
    pub tasks_failed: u64,
    pub tasks_skipped: u64,
    /// Payload bytes fetched during the run (0 without a counter).
    pub bytes_read: u64,
    pub elapsed: Duration,
}

impl ExecReport {
    /// First failed task in id order, as a surfaced error.
    pub fn first_failure(&self, graph: &TaskGraph) -> Option<Error> {
        self.outcomes
            .iter()
            .find(|(_, o)| o.status == TaskStatus::Failed)
            .map(|(id, o)| Error::TaskFailed {
                id: id.as_str().to_string(),
                kind: graph
                    .get(id)
                    .map(|s| s.op_kind.clone())
                    .unwrap_or_default(),
                reason: o.error.clone().unwrap_or_default(),
            })
    }
}

/// Called after each completed layer with (layer index, layer count,
/// tasks in the layer).
pub type ProgressFn = dyn Fn(usize, usize, usize) + Send + Sync;

pub struct Executor {
    workers: usize,
    retries: u32,
    bytes_counter: Option<Arc<AtomicU64>>,
    progress: Option<Arc<ProgressFn>>,
}

impl Executor {
    pub fn new(workers: usize) -> Self {
        Executor {
            workers: workers.max(1),
            retries: 0,
            bytes_counter: None,
            progress: None,
        }
    }

    pub fn retries(mut self, retries: u32) -> Self {
        self.retries = retries;
        self
    }

    /// Counter snapshotted around the run to report `bytes_read`.
    pub fn bytes_counter(mut self, counter: Arc<AtomicU64>) -> Self {
        self.bytes_counter = Some(counter);
        self
    }

    pub fn progress(mut self, f: Arc<ProgressFn>) -> Self {
        self.progress = Some(f);
        self
    }

    /// Run the graph to completion. Task failures are recorded, not
    /// returned: a failed task marks all transitive dependents skipped
    /// while independent branches still complete.
    pub fn run(&self, graph: &TaskGraph) -> (BTreeMap<TaskId, TaskValue>, ExecReport) {
        let started = Instant::now();
        let bytes_before = self
            .bytes_counter
            .as_ref()
            .map_or(0, |c| c.load(Ordering::Relaxed));

        let layers = graph.schedule();
        let mut results: BTreeMap<TaskId, TaskValue> = BTreeMap::new();
        let mut outcomes: BTreeMap<TaskId, TaskOutcome> = BTreeMap::new();

        for (layer_index, layer) in layers.iter().enumerate() {
            let mut runnable: VecDeque<TaskId> = VecDeque::new();
            for id in layer {
                let spec = graph.get(id).expect("scheduled task exists");
                let blocked = spec
                    .deps
                    .iter()
                    .any(|d| outcomes.get(d).map(|o| o.status) != Some(TaskStatus::Ok));
                if blocked {
                    outcomes.insert(
                        id.clone(),
                        TaskOutcome {
                            status: TaskStatus::Skipped,
                            duration: Duration::ZERO,
                            error: None,
                        },
                    );
                } else {
                    runnable.push_back(id.clone());
                }
            }

            let lanes = self.workers.min(runnable.len());
            let queue = Mutex::new(runnable);
            let finished: Mutex<Vec<(TaskId, Duration, Result<TaskValue>)>> =
                Mutex::new(Vec::new());
            if lanes > 0 {
                std::thread::scope(|scope| {
                    for _ in 0..lanes {
                        scope.spawn(|| loop {
                            let Some(id) = queue.lock().unwrap().pop_front() else {
                                break;
                            };
                            let spec = graph.get(&id).expect("scheduled task exists");
                            let op = graph
                                .registry()
                                .get(&spec.op_kind)
                                .expect("op checked at add_task");
                            let dep_values: Vec<TaskValue> = spec
                                .deps
                                .iter()
                                .map(|d| results.get(d).expect("dep ran earlier").clone())
                                .collect();
                            let t0 = Instant::now();
                            let mut attempts_left = self.retries;
                            let result = loop {
                                match op(&spec.params, &dep_values) {
                                    Ok(v) => break Ok(v),
                                    Err(_) if attempts_left > 0 => attempts_left -= 1,
                                    Err(e) => break Err(e),
                                }
                            };
                            finished.lock().unwrap().push((id, t0.elapsed(), result));
                        });
                    }
                });
            }

            // Merge in id order so reports are schedule-independent.
            let mut done = finished.into_inner().unwrap();
            done.sort_by(|a, b| a.0.cmp(&b.0));
            for (id, duration, result) in done {
                match result {
                    Ok(value) => {
                        results.insert(id.clone(), value);
                        outcomes.insert(
                            id,
                            TaskOutcome {
                                status: TaskStatus::Ok,
                                duration,
                                error: None,
                            },
                        );
                    }
                    Err(e) => {
                        outcomes.insert(
                            id,
                            TaskOutcome {
                                status: TaskStatus::Failed,
                                duration,
                                error: Some(e.to_string()),
                            },
                        );
                    }
                }
            }

            if let Some(progress) = &self.progress {
                progress(layer_index, layers.len(), layer.len());
            }
        }

        let bytes_after = self
            .bytes_counter
            .as_ref()
            .map_or(0, |c| c.load(Ordering::Relaxed));
        let mut report = ExecReport {
            workers: self.workers,
            tasks_completed: 0,
            tasks_failed: 0,
            tasks_skipped: 0,
            bytes_read: bytes_after - bytes_before,
            elapsed: started.elapsed(),
            outcomes,
        };
        for outcome in report.outcomes.values() {
            match outcome.status {
                TaskStatus::Ok => report.tasks_completed += 1,
                TaskStatus::Failed => report.tasks_failed += 1,
                TaskStatus::Skipped => report.tasks_skipped += 1,
            }
        }
        (results, report)
    }
}
