//! Content-addressed task graphs: pure operations registered by kind,
//! deduplicating task insertion, and deterministic layered scheduling.
//! Cycles are impossible by construction because a task's dependencies must
//! already exist when it is added.

pub mod exec;
pub mod metrics;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Content hash of a task: lowercase hex SHA-256, see [`task_id`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskId(String);

impl TaskId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Value produced by a task and handed to its dependents.
#[derive(Debug, Clone)]
pub enum TaskValue {
    Unit,
    Json(Value),
    /// Bulk payloads are shared, not copied, between dependents.
    Bytes(Arc<[u8]>),
}

impl TaskValue {
    pub fn as_json(&self) -> Option<&Value> {
        match self {
            TaskValue::Json(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_bytes(&self) -> Option<&[u8]> {
        match self {
            TaskValue::Bytes(b) => Some(b),
            _ => None,
        }
    }
}

/// A registered operation: a pure function of (params, dep results).
/// Dep values arrive in the task's declared dependency order; operations
/// taking multiple deps must not depend on that order (task identity sorts
/// dependency ids).
pub type OpFn = dyn Fn(&Value, &[TaskValue]) -> Result<TaskValue> + Send + Sync;

/// Operation registry; immutable once wrapped in an [`Arc`] for a graph.
#[derive(Default)]
pub struct OpRegistry {
    ops: BTreeMap<String, Arc<OpFn>>,
}

impl OpRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, kind: &str, f: F)
    where
        F: Fn(&Value, &[TaskValue]) -> Result<TaskValue> + Send + Sync + 'static,
    {
        self.ops.insert(kind.to_string(), Arc::new(f));
    }

    pub fn contains(&self, kind: &str) -> bool {
        self.ops.contains_key(kind)
    }

    pub fn get(&self, kind: &str) -> Option<Arc<OpFn>> {
        self.ops.get(kind).cloned()
    }
}

/// One node of the graph.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub id: TaskId,
    pub op_kind: String,
    pub params: Value,
    pub deps: Vec<TaskId>,
}

/// Task identity: SHA-256 over `op_kind`, a NUL byte, the canonical JSON
/// encoding of `params` (compact separators, object keys in lexicographic
/// order, which is this crate's default encoding), a NUL byte, then each
/// dependency id in ascending order, each followed by a NUL byte.
pub fn task_id(op_kind: &str, params: &Value, deps: &[TaskId]) -> TaskId {
    let mut hasher = Sha256::new();
    hasher.update(op_kind.as_bytes());
    hasher.update([0u8]);
    hasher.update(params.to_string().as_bytes());
    hasher.update([0u8]);
    let mut sorted: Vec<&TaskId> = deps.iter().collect();
    sorted.sort();
    for dep in sorted {
        hasher.update(dep.as_str().as_bytes());
        hasher.update([0u8]);
    }
    TaskId(hex::encode(hasher.finalize()))
}

/// Acyclic, content-addressed DAG of tasks over a fixed registry.
pub struct TaskGraph {
    registry: Arc<OpRegistry>,
    nodes: BTreeMap<TaskId, TaskSpec>,
}

impl TaskGraph {
    pub fn new(registry: Arc<OpRegistry>) -> Self {
        TaskGraph {
            registry,
            nodes: BTreeMap::new(),
        }
    }

    pub fn registry(&self) -> &Arc<OpRegistry> {
        &self.registry
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn get(&self, id: &TaskId) -> Option<&TaskSpec> {
        self.nodes.get(id)
    }

    /// Node ids in ascending order.
    pub fn ids(&self) -> impl Iterator<Item = &TaskId> {
        self.nodes.keys()
    }

    /// Insert a task. Identical content deduplicates to the existing node
    /// and id. Duplicate dependency ids are collapsed (first occurrence
    /// kept). Dependencies must already be present.
    pub fn add_task(&mut self, op_kind: &str, params: Value, deps: Vec<TaskId>) -> Result<TaskId> {
        if !self.registry.contains(op_kind) {
            return Err(Error::UnregisteredOp {
                kind: op_kind.to_string(),
            });
        }
        let mut unique_deps: Vec<TaskId> = Vec::with_capacity(deps.len());
        for dep in deps {
            if !self.nodes.contains_key(&dep) {
                return Err(Error::UnknownDep {
                    id: dep.as_str().to_string(),
                });
            }
            if !unique_deps.contains(&dep) {
                unique_deps.push(dep);
            }
        }
        let id = task_id(op_kind, &params, &unique_deps);
        self.nodes.entry(id.clone()).or_insert_with(|| TaskSpec {
            id: id.clone(),
            op_kind: op_kind.to_string(),
            params,
            deps: unique_deps,
        });
        Ok(id)
    }

    /// Layered topological order: every dependency appears in a strictly
    /// earlier layer; ids ascend within each layer.
    pub fn schedule(&self) -> Vec<Vec<TaskId>> {
        let mut indegree: BTreeMap<&TaskId, usize> = BTreeMap::new();
        let mut dependents: BTreeMap<&TaskId, Vec<&TaskId>> = BTreeMap::new();
        for (id, spec) in &self.nodes {
            indegree.insert(id, spec.deps.len());
            for dep in &spec.deps {
                dependents.entry(dep).or_default().push(id);
            }
        }
        // BTreeMap iteration keeps each layer ascending without re-sorting.
        let mut ready: Vec<&TaskId> = indegree
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(&id, _)| id)
            .collect();
        let mut layers = Vec::new();
        while !ready.is_empty() {
            let mut next: Vec<&TaskId> = Vec::new();
            for id in &ready {
                for &dependent in dependents.get(*id).into_iter().flatten() {
                    let d = indegree.get_mut(dependent).unwrap();
                    *d -= 1;
                    if *d == 0 {
                        next.push(dependent);
                    }
                }
            }
            next.sort();
            layers.push(ready.iter().map(|id| (*id).clone()).collect());
            ready = next;
        }
        layers
    }
}
