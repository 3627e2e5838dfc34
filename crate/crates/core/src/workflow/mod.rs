//! DAG workflow definitions in the ConfigMap `dependency.json` layout.
//!
//! A workflow document is a JSON object keyed by task id. Every task carries
//! `input`, `output`, `image`, `cpuNum`, `memNum` and `args`:
//!
//! ```json
//! {
//!   "0": {
//!     "input": [],
//!     "output": ["1", "2"],
//!     "image": ["shanchenggang/task-emulator:latest"],
//!     "cpuNum": ["1200"],
//!     "memNum": ["1200"],
//!     "args": ["-c", "1", "-m", "100", "-t", "5"]
//!   }
//! }
//! ```

mod builtin;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde_json::Value;
use thiserror::Error;

pub use builtin::{builtin_workflow, motivation_dag, BuiltinWorkflow, DEFAULT_CORPUS_SIZE};

use crate::time::SimTime;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WorkflowError {
    #[error("malformed workflow json: {0}")]
    MalformedJson(String),
    #[error("task {task:?} is missing field {field:?}")]
    MissingField { task: String, field: String },
    #[error("task {task:?} field {field:?} has a non-numeric resource value {value}")]
    NonNumericResource {
        task: String,
        field: String,
        value: String,
    },
    #[error("task {task:?} field {field:?}: {reason}")]
    InvalidField {
        task: String,
        field: String,
        reason: String,
    },
    #[error("invalid task {task:?}: {reason}")]
    InvalidTask { task: String, reason: String },
    #[error("task {from:?} references unknown task {to:?}")]
    DanglingReference { from: String, to: String },
    #[error("edge {from:?} -> {to:?} is declared on only one side")]
    AsymmetricEdge { from: String, to: String },
    #[error("dependency cycle: {}", .0.join(" -> "))]
    CycleDetected(Vec<String>),
    #[error("workflow has no tasks")]
    EmptyWorkflow,
    #[error("unknown task id {0:?}")]
    UnknownTaskId(String),
    #[error("task {0:?} is both succeeded and in flight")]
    OverlappingSets(String),
    #[error("unknown workflow name {0:?}")]
    UnknownWorkflowName(String),
    #[error("size {size} is too small for {name} (minimum {min})")]
    SizeTooSmall {
        name: String,
        size: usize,
        min: usize,
    },
}

/// One workflow step: a container image run with a fixed resource request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub id: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub image: String,
    pub cpu_milli: u64,
    pub mem_mib: u64,
    pub args: Vec<String>,
}

impl TaskSpec {
    /// How long the task-emulator container runs.
    ///
    /// The emulator drives `stress` through one phase per resource flag
    /// (`-c` CPU forks, `-m` memory) and each phase lasts `-t` seconds, so
    /// `-c 1 -m 100 -t 5` runs for 10 s. Without `-t` the phase length is 5 s.
    pub fn emulated_duration(&self) -> SimTime {
        let mut phases = 0u64;
        let mut phase_secs = 5.0;
        let mut it = self.args.iter();
        while let Some(arg) = it.next() {
            match arg.as_str() {
                "-c" | "--cpu" | "-m" | "--vm" => phases += 1,
                "-t" | "--timeout" => {
                    if let Some(v) = it.next().and_then(|v| v.parse::<f64>().ok()) {
                        phase_secs = v;
                    }
                }
                _ => {}
            }
        }
        SimTime::from_secs_f64(phases.max(1) as f64 * phase_secs)
    }
}

/// A validated DAG of tasks keyed by task id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkflowSpec {
    name: String,
    tasks: BTreeMap<String, TaskSpec>,
    entry_ids: Vec<String>,
    exit_ids: Vec<String>,
}

impl WorkflowSpec {
    /// Validates `tasks` and builds the workflow.
    pub fn new(
        name: impl Into<String>,
        tasks: impl IntoIterator<Item = TaskSpec>,
    ) -> Result<Self, WorkflowError> {
        let mut map = BTreeMap::new();
        for task in tasks {
            if map.contains_key(&task.id) {
                return Err(WorkflowError::InvalidTask {
                    task: task.id.clone(),
                    reason: "duplicate task id".into(),
                });
            }
            map.insert(task.id.clone(), task);
        }
        validate(&map)?;
        let entry_ids = map
            .values()
            .filter(|t| t.inputs.is_empty())
            .map(|t| t.id.clone())
            .collect();
        let exit_ids = map
            .values()
            .filter(|t| t.outputs.is_empty())
            .map(|t| t.id.clone())
            .collect();
        Ok(WorkflowSpec {
            name: name.into(),
            tasks: map,
            entry_ids,
            exit_ids,
        })
    }

    /// Parses a `dependency.json` document. The workflow is named `workflow`;
    /// use [`WorkflowSpec::with_name`] to rename it.
    pub fn parse(text: &str) -> Result<Self, WorkflowError> {
        parse_workflow(text)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tasks(&self) -> &BTreeMap<String, TaskSpec> {
        &self.tasks
    }

    pub fn task(&self, id: &str) -> Option<&TaskSpec> {
        self.tasks.get(id)
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn entry_ids(&self) -> &[String] {
        &self.entry_ids
    }

    pub fn exit_ids(&self) -> &[String] {
        &self.exit_ids
    }

    /// All `(parent, child)` edges in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (&str, &str)> + '_ {
        self.tasks
            .values()
            .flat_map(|t| t.outputs.iter().map(move |c| (t.id.as_str(), c.as_str())))
    }

    /// Tasks not yet succeeded or in flight whose inputs have all succeeded.
    pub fn ready_tasks(
        &self,
        succeeded: &BTreeSet<String>,
        in_flight: &BTreeSet<String>,
    ) -> Result<BTreeSet<String>, WorkflowError> {
        for id in succeeded.iter().chain(in_flight) {
            if !self.tasks.contains_key(id) {
                return Err(WorkflowError::UnknownTaskId(id.clone()));
            }
        }
        if let Some(id) = succeeded.intersection(in_flight).next() {
            return Err(WorkflowError::OverlappingSets(id.clone()));
        }
        Ok(self
            .tasks
            .values()
            .filter(|t| !succeeded.contains(&t.id) && !in_flight.contains(&t.id))
            .filter(|t| t.inputs.iter().all(|p| succeeded.contains(p)))
            .map(|t| t.id.clone())
            .collect())
    }

    /// Groups tasks by the length of the longest path from an entry task.
    pub fn level_partition(&self) -> Vec<BTreeSet<String>> {
        let depth = self.depths();
        let max = depth.values().copied().max().unwrap_or(0);
        let mut levels = vec![BTreeSet::new(); if self.tasks.is_empty() { 0 } else { max + 1 }];
        for (id, d) in depth {
            levels[d].insert(id);
        }
        levels
    }

    /// Longest-path depth of every task.
    pub fn depths(&self) -> BTreeMap<String, usize> {
        let mut depth: BTreeMap<String, usize> = BTreeMap::new();
        for id in self.topological_order() {
            let d = self.tasks[&id]
                .inputs
                .iter()
                .map(|p| depth[p] + 1)
                .max()
                .unwrap_or(0);
            depth.insert(id, d);
        }
        depth
    }

    /// Kahn's algorithm with lexicographic tie-breaking.
    pub fn topological_order(&self) -> Vec<String> {
        let mut indegree: BTreeMap<&str, usize> = self
            .tasks
            .values()
            .map(|t| (t.id.as_str(), t.inputs.len()))
            .collect();
        let mut frontier: BTreeSet<&str> = indegree
            .iter()
            .filter(|(_, d)| **d == 0)
            .map(|(id, _)| *id)
            .collect();
        let mut order = Vec::with_capacity(self.tasks.len());
        while let Some(id) = frontier.pop_first() {
            order.push(id.to_string());
            for child in &self.tasks[id].outputs {
                let d = indegree.get_mut(child.as_str()).expect("validated edge");
                *d -= 1;
                if *d == 0 {
                    frontier.insert(child.as_str());
                }
            }
        }
        order
    }

    /// Width of the widest level.
    pub fn max_level_width(&self) -> usize {
        self.level_partition().iter().map(BTreeSet::len).max().unwrap_or(0)
    }

    /// Serializes back to the `dependency.json` layout (resources as
    /// single-element string arrays).
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_value()).expect("workflow serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.to_value()).expect("workflow serializes")
    }

    pub fn to_value(&self) -> Value {
        let mut doc = serde_json::Map::new();
        for t in self.tasks.values() {
            let mut obj = serde_json::Map::new();
            obj.insert("input".into(), strings(&t.inputs));
            obj.insert("output".into(), strings(&t.outputs));
            obj.insert("image".into(), Value::from(vec![t.image.clone()]));
            obj.insert("cpuNum".into(), Value::from(vec![t.cpu_milli.to_string()]));
            obj.insert("memNum".into(), Value::from(vec![t.mem_mib.to_string()]));
            obj.insert("args".into(), strings(&t.args));
            doc.insert(t.id.clone(), Value::Object(obj));
        }
        Value::Object(doc)
    }
}

fn strings(v: &[String]) -> Value {
    Value::Array(v.iter().cloned().map(Value::String).collect())
}

/// Parses and validates a `dependency.json` workflow document.
pub fn parse_workflow(text: &str) -> Result<WorkflowSpec, WorkflowError> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| WorkflowError::MalformedJson(e.to_string()))?;
    from_value(&value)
}

/// Builds a spec from an already-decoded document.
pub fn from_value(value: &Value) -> Result<WorkflowSpec, WorkflowError> {
    let Value::Object(doc) = value else {
        return Err(WorkflowError::MalformedJson(
            "top level must be an object keyed by task id".into(),
        ));
    };
    if doc.is_empty() {
        return Err(WorkflowError::EmptyWorkflow);
    }
    let mut tasks = Vec::with_capacity(doc.len());
    for (id, body) in doc {
        let Value::Object(body) = body else {
            return Err(WorkflowError::MalformedJson(format!(
                "task {id:?} must be an object"
            )));
        };
        let field = |name: &str| {
            body.get(name).ok_or_else(|| WorkflowError::MissingField {
                task: id.clone(),
                field: name.to_string(),
            })
        };
        tasks.push(TaskSpec {
            id: id.clone(),
            inputs: id_list(id, "input", field("input")?)?,
            outputs: id_list(id, "output", field("output")?)?,
            image: image_ref(id, field("image")?)?,
            cpu_milli: resource(id, "cpuNum", field("cpuNum")?)?,
            mem_mib: resource(id, "memNum", field("memNum")?)?,
            args: string_list(id, "args", field("args")?)?,
        });
    }
    WorkflowSpec::new("workflow", tasks)
}

fn id_list(task: &str, field: &str, v: &Value) -> Result<Vec<String>, WorkflowError> {
    let Value::Array(items) = v else {
        return Err(invalid(task, field, "expected an array of task ids"));
    };
    items
        .iter()
        .map(|item| match item {
            Value::String(s) => Ok(s.clone()),
            Value::Number(n) if n.is_u64() => Ok(n.to_string()),
            _ => Err(invalid(task, field, "task ids must be strings")),
        })
        .collect()
}

fn string_list(task: &str, field: &str, v: &Value) -> Result<Vec<String>, WorkflowError> {
    let Value::Array(items) = v else {
        return Err(invalid(task, field, "expected an array of strings"));
    };
    items
        .iter()
        .map(|item| match item {
            Value::String(s) => Ok(s.clone()),
            Value::Number(n) => Ok(n.to_string()),
            _ => Err(invalid(task, field, "expected an array of strings")),
        })
        .collect()
}

fn image_ref(task: &str, v: &Value) -> Result<String, WorkflowError> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Array(items) => match items.as_slice() {
            [Value::String(s)] => Ok(s.clone()),
            _ => Err(invalid(task, "image", "expected one image reference")),
        },
        _ => Err(invalid(task, "image", "expected an image reference")),
    }
}

/// Accepts `["1200"]`, `"1200"`, `1200` and `[1200]`.
fn resource(task: &str, field: &str, v: &Value) -> Result<u64, WorkflowError> {
    let scalar = match v {
        Value::Array(items) if items.len() == 1 => &items[0],
        Value::Array(_) => return Err(invalid(task, field, "expected exactly one value")),
        other => other,
    };
    let parsed = match scalar {
        Value::String(s) => s.trim().parse::<u64>().ok(),
        Value::Number(n) => n.as_u64(),
        _ => None,
    };
    parsed.ok_or_else(|| WorkflowError::NonNumericResource {
        task: task.to_string(),
        field: field.to_string(),
        value: scalar.to_string(),
    })
}

fn invalid(task: &str, field: &str, reason: &str) -> WorkflowError {
    WorkflowError::InvalidField {
        task: task.to_string(),
        field: field.to_string(),
        reason: reason.to_string(),
    }
}

fn validate(tasks: &BTreeMap<String, TaskSpec>) -> Result<(), WorkflowError> {
    if tasks.is_empty() {
        return Err(WorkflowError::EmptyWorkflow);
    }
    for t in tasks.values() {
        let bad = |reason: &str| WorkflowError::InvalidTask {
            task: t.id.clone(),
            reason: reason.to_string(),
        };
        if t.id.is_empty() {
            return Err(bad("empty task id"));
        }
        if t.cpu_milli == 0 || t.mem_mib == 0 {
            return Err(bad("resource requests must be positive"));
        }
        if t.inputs.contains(&t.id) || t.outputs.contains(&t.id) {
            return Err(bad("task depends on itself"));
        }
        for list in [&t.inputs, &t.outputs] {
            let unique: BTreeSet<&String> = list.iter().collect();
            if unique.len() != list.len() {
                return Err(bad("duplicate dependency"));
            }
        }
    }
    for t in tasks.values() {
        for other in t.inputs.iter().chain(&t.outputs) {
            if !tasks.contains_key(other) {
                return Err(WorkflowError::DanglingReference {
                    from: t.id.clone(),
                    to: other.clone(),
                });
            }
        }
    }
    // Both sides must declare every edge. Collect from each side and report
    // the first (parent, child) pair in lexicographic order that is missing
    // from the other side.
    let declared_out: BTreeSet<(&str, &str)> = tasks
        .values()
        .flat_map(|t| t.outputs.iter().map(move |c| (t.id.as_str(), c.as_str())))
        .collect();
    let declared_in: BTreeSet<(&str, &str)> = tasks
        .values()
        .flat_map(|t| t.inputs.iter().map(move |p| (p.as_str(), t.id.as_str())))
        .collect();
    if let Some((from, to)) = declared_out.symmetric_difference(&declared_in).next() {
        return Err(WorkflowError::AsymmetricEdge {
            from: from.to_string(),
            to: to.to_string(),
        });
    }
    if let Some(cycle) = find_cycle(tasks) {
        return Err(WorkflowError::CycleDetected(cycle));
    }
    Ok(())
}

fn find_cycle(tasks: &BTreeMap<String, TaskSpec>) -> Option<Vec<String>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    let mut mark: BTreeMap<&str, Mark> = tasks.keys().map(|k| (k.as_str(), Mark::New)).collect();
    for root in tasks.keys() {
        if mark[root.as_str()] != Mark::New {
            continue;
        }
        // Iterative DFS; the stack holds (node, next child index).
        let mut stack: Vec<(&str, usize)> = vec![(root.as_str(), 0)];
        mark.insert(root.as_str(), Mark::Active);
        while let Some((node, idx)) = stack.last_mut() {
            let outputs = &tasks[*node].outputs;
            if *idx == outputs.len() {
                mark.insert(node, Mark::Done);
                stack.pop();
                continue;
            }
            let child = outputs[*idx].as_str();
            *idx += 1;
            match mark[child] {
                Mark::New => {
                    mark.insert(child, Mark::Active);
                    stack.push((child, 0));
                }
                Mark::Active => {
                    let start = stack.iter().position(|(n, _)| *n == child).unwrap();
                    let mut path: Vec<String> =
                        stack[start..].iter().map(|(n, _)| n.to_string()).collect();
                    path.push(child.to_string());
                    return Some(path);
                }
                Mark::Done => {}
            }
        }
    }
    None
}

/// Renders a compact one-line description, e.g. for logs.
pub fn describe(spec: &WorkflowSpec) -> String {
    let mut s = String::new();
    let widths: Vec<usize> = spec.level_partition().iter().map(BTreeSet::len).collect();
    let _ = write!(
        s,
        "{} ({} tasks, {} levels, widths {:?})",
        spec.name(),
        spec.len(),
        widths.len(),
        widths
    );
    s
}
