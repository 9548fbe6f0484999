//! Workflow representation: DAGs of task instances exchanging file artifacts.
//!
//! Values are immutable after construction and safe to share across
//! concurrent simulation runs. JSON serialization uses the top-level keys
//! `tasks`, `files`, `templates` and round-trips losslessly.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

/// Identifier of a file artifact, unique within a DAG.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FileId(pub u64);

/// Identifier of a task instance, unique within a DAG.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u64);

impl fmt::Display for FileId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A file exchanged between tasks. Workflow inputs have no producer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileArtifact {
    pub id: FileId,
    /// Size in gigabytes, never negative.
    pub size_gb: f64,
    /// Task that writes this artifact; `None` for workflow inputs.
    pub producer: Option<TaskId>,
}

/// How many threads a tool can use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThreadModel {
    /// Tool always runs with exactly `n` threads.
    Fixed { n: u32 },
    /// Tool accepts a thread-count parameter up to `max`.
    Configurable { max: u32 },
}

impl ThreadModel {
    /// Smallest allotment the tool can run with.
    pub fn min_threads(&self) -> u32 {
        match *self {
            ThreadModel::Fixed { n } => n,
            ThreadModel::Configurable { .. } => 1,
        }
    }

    pub fn max_threads(&self) -> u32 {
        match *self {
            ThreadModel::Fixed { n } => n,
            ThreadModel::Configurable { max } => max,
        }
    }
}

/// Resident memory required by one instance of a tool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryModel {
    Fixed { gb: f64 },
    /// `base + per_input_gb * total input gigabytes`.
    BasePlusPerInput { base_gb: f64, per_input_gb: f64 },
}

impl MemoryModel {
    pub fn required_gb(&self, input_gb: f64) -> f64 {
        match *self {
            MemoryModel::Fixed { gb } => gb,
            MemoryModel::BasePlusPerInput { base_gb, per_input_gb } => {
                base_gb + per_input_gb * input_gb
            }
        }
    }
}

/// Serial/parallel split of a tool's compute time. The duration law lives in
/// the engine: `serial_s + parallel_s_per_gb * input_gb / threads`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkModel {
    pub serial_s: f64,
    pub parallel_s_per_gb: f64,
}

/// Affine map from total input gigabytes to output gigabytes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutputSizeModel {
    pub fixed_gb: f64,
    pub per_input_gb: f64,
}

impl OutputSizeModel {
    pub fn output_gb(&self, input_gb: f64) -> f64 {
        self.fixed_gb + self.per_input_gb * input_gb
    }
}

/// A tool archetype: resource model shared by all its instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTemplate {
    pub name: String,
    pub threads: ThreadModel,
    pub memory: MemoryModel,
    pub work: WorkModel,
    /// Deterministic tools are eligible for invocation caching.
    pub deterministic: bool,
    pub output_size: OutputSizeModel,
}

/// One concrete invocation of a template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: TaskId,
    /// Name of the template in the DAG's template table.
    pub template: String,
    pub inputs: Vec<FileId>,
    /// Ordered key-value pairs, e.g. region index or sample pair. Order is
    /// part of the task's identity so signatures stay canonical.
    pub params: Vec<(String, String)>,
    pub outputs: Vec<FileId>,
    /// Gigabytes the tool actually processes. Defaults to the sum of input
    /// sizes; generators override it when a task reads more than it uses
    /// (e.g. variant calling restricted to one region of a full alignment).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compute_input_gb: Option<f64>,
}

/// Tasks plus file artifacts plus the template table they refer to.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkflowDag {
    pub templates: BTreeMap<String, TaskTemplate>,
    pub files: Vec<FileArtifact>,
    pub tasks: Vec<TaskInstance>,
}

/// A broken DAG invariant. Violations are reported, never silently fixed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Violation {
    DuplicateTaskId(TaskId),
    DuplicateFileId(FileId),
    UnknownTemplate { task: TaskId, template: String },
    UnknownInput { task: TaskId, file: FileId },
    UnknownOutput { task: TaskId, file: FileId },
    UnknownProducer { file: FileId, producer: TaskId },
    /// The file's `producer` field disagrees with the task that lists it as
    /// an output (or two tasks claim the same output).
    ProducerMismatch { file: FileId },
    NegativeSize(FileId),
    Cycle { involving: TaskId },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateTaskId(t) => write!(f, "duplicate task id {t}"),
            Violation::DuplicateFileId(x) => write!(f, "duplicate file id {x}"),
            Violation::UnknownTemplate { task, template } => {
                write!(f, "task {task} references unknown template {template:?}")
            }
            Violation::UnknownInput { task, file } => {
                write!(f, "task {task} reads unknown file {file}")
            }
            Violation::UnknownOutput { task, file } => {
                write!(f, "task {task} writes unknown file {file}")
            }
            Violation::UnknownProducer { file, producer } => {
                write!(f, "file {file} names unknown producer task {producer}")
            }
            Violation::ProducerMismatch { file } => {
                write!(f, "file {file} producer field disagrees with task outputs")
            }
            Violation::NegativeSize(x) => write!(f, "file {x} has negative size"),
            Violation::Cycle { involving } => {
                write!(f, "dependency cycle involving task {involving}")
            }
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DagError {
    #[error("invalid DAG: {0}")]
    Invalid(String),
}

/// Content key of a task invocation: template name, ordered input artifact
/// ids and params. Instance id and outputs are deliberately excluded, so two
/// redundant invocations of the same tool on the same data compare equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Signature(String);

impl Signature {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// Deterministic, injective signature over (template, inputs, params).
/// Length-prefixed encoding keeps distinct field values from colliding.
pub fn signature(task: &TaskInstance) -> Signature {
    let mut s = String::with_capacity(64);
    push_field(&mut s, &task.template);
    s.push('|');
    for input in &task.inputs {
        s.push_str(&input.0.to_string());
        s.push(',');
    }
    s.push('|');
    for (k, v) in &task.params {
        push_field(&mut s, k);
        s.push('=');
        push_field(&mut s, v);
        s.push(',');
    }
    Signature(s)
}

fn push_field(buf: &mut String, field: &str) {
    buf.push_str(&field.len().to_string());
    buf.push(':');
    buf.push_str(field);
}

impl WorkflowDag {
    /// Checks every structural invariant and returns all violations found.
    /// An empty list means the DAG is executable (a topological order of
    /// tasks exists and every reference resolves).
    pub fn validate(&self) -> Vec<Violation> {
        let mut violations = Vec::new();

        let mut file_index: HashMap<FileId, usize> = HashMap::with_capacity(self.files.len());
        for (i, file) in self.files.iter().enumerate() {
            if file_index.insert(file.id, i).is_some() {
                violations.push(Violation::DuplicateFileId(file.id));
            }
            if file.size_gb < 0.0 {
                violations.push(Violation::NegativeSize(file.id));
            }
        }
        let mut task_index: HashMap<TaskId, usize> = HashMap::with_capacity(self.tasks.len());
        for (i, task) in self.tasks.iter().enumerate() {
            if task_index.insert(task.id, i).is_some() {
                violations.push(Violation::DuplicateTaskId(task.id));
            }
        }

        // Producer fields must match task outputs exactly (at most one producer).
        let mut produced_by: HashMap<FileId, TaskId> = HashMap::with_capacity(self.files.len());
        for task in &self.tasks {
            if !self.templates.contains_key(&task.template) {
                violations.push(Violation::UnknownTemplate {
                    task: task.id,
                    template: task.template.clone(),
                });
            }
            for input in &task.inputs {
                if !file_index.contains_key(input) {
                    violations.push(Violation::UnknownInput { task: task.id, file: *input });
                }
            }
            for output in &task.outputs {
                if !file_index.contains_key(output) {
                    violations.push(Violation::UnknownOutput { task: task.id, file: *output });
                    continue;
                }
                if produced_by.insert(*output, task.id).is_some() {
                    violations.push(Violation::ProducerMismatch { file: *output });
                }
            }
        }
        for file in &self.files {
            match (file.producer, produced_by.get(&file.id)) {
                (Some(p), Some(q)) if p == *q => {}
                (None, None) => {}
                (Some(p), _) if !task_index.contains_key(&p) => {
                    violations.push(Violation::UnknownProducer { file: file.id, producer: p });
                }
                _ => violations.push(Violation::ProducerMismatch { file: file.id }),
            }
        }

        if !violations.is_empty() {
            return violations;
        }

        // Kahn's algorithm over producer->consumer edges; leftovers are cycles.
        let mut indegree = vec![0usize; self.tasks.len()];
        let mut consumers_of_task: Vec<Vec<usize>> = vec![Vec::new(); self.tasks.len()];
        for (i, task) in self.tasks.iter().enumerate() {
            for input in &task.inputs {
                let file = &self.files[file_index[input]];
                if let Some(producer) = file.producer {
                    indegree[i] += 1;
                    consumers_of_task[task_index[&producer]].push(i);
                }
            }
        }
        let mut queue: Vec<usize> =
            indegree.iter().enumerate().filter(|(_, d)| **d == 0).map(|(i, _)| i).collect();
        let mut seen = 0usize;
        while let Some(i) = queue.pop() {
            seen += 1;
            for &j in &consumers_of_task[i] {
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    queue.push(j);
                }
            }
        }
        if seen != self.tasks.len() {
            let mut stuck: Vec<TaskId> = indegree
                .iter()
                .enumerate()
                .filter(|(_, d)| **d > 0)
                .map(|(i, _)| self.tasks[i].id)
                .collect();
            stuck.sort();
            violations.push(Violation::Cycle { involving: stuck[0] });
        }

        violations
    }

    /// Length of the longest dependency chain under `duration_of`, in the
    /// same unit `duration_of` returns.
    pub fn critical_path_hours(
        &self,
        duration_of: impl Fn(&TaskInstance) -> f64,
    ) -> Result<f64, DagError> {
        let index = DagIndex::build(self).map_err(|v| {
            DagError::Invalid(v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; "))
        })?;
        let mut finish = vec![0.0f64; self.tasks.len()];
        let mut longest = 0.0f64;
        for &i in &index.topo_order {
            let task = &self.tasks[i];
            let mut start = 0.0f64;
            for input in &task.inputs {
                let file = &self.files[index.file_pos[input]];
                if let Some(producer) = file.producer {
                    start = start.max(finish[index.task_pos[&producer]]);
                }
            }
            finish[i] = start + duration_of(task);
            longest = longest.max(finish[i]);
        }
        Ok(longest)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("DAG serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Positional lookup structures for a validated DAG. Built once, then used
/// by the engine and the generator checks; positions index into the DAG's
/// `tasks` / `files` vectors.
pub struct DagIndex {
    pub task_pos: HashMap<TaskId, usize>,
    pub file_pos: HashMap<FileId, usize>,
    /// Tasks consuming each file, by file position.
    pub consumers: Vec<Vec<usize>>,
    /// Number of produced (non-workflow-input) files each task waits for.
    pub unmet_deps: Vec<usize>,
    /// Task positions in one valid execution order.
    pub topo_order: Vec<usize>,
}

impl DagIndex {
    /// Builds the index, validating the DAG first.
    pub fn build(dag: &WorkflowDag) -> Result<Self, Vec<Violation>> {
        let violations = dag.validate();
        if !violations.is_empty() {
            return Err(violations);
        }
        let task_pos: HashMap<TaskId, usize> =
            dag.tasks.iter().enumerate().map(|(i, t)| (t.id, i)).collect();
        let file_pos: HashMap<FileId, usize> =
            dag.files.iter().enumerate().map(|(i, f)| (f.id, i)).collect();
        let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); dag.files.len()];
        let mut unmet_deps = vec![0usize; dag.tasks.len()];
        for (i, task) in dag.tasks.iter().enumerate() {
            for input in &task.inputs {
                let fp = file_pos[input];
                consumers[fp].push(i);
                if dag.files[fp].producer.is_some() {
                    unmet_deps[i] += 1;
                }
            }
        }

        // Deterministic topological order: among ready tasks, smallest id first.
        let mut remaining = unmet_deps.clone();
        let mut ready: std::collections::BinaryHeap<std::cmp::Reverse<(TaskId, usize)>> =
            remaining
                .iter()
                .enumerate()
                .filter(|(_, d)| **d == 0)
                .map(|(i, _)| std::cmp::Reverse((dag.tasks[i].id, i)))
                .collect();
        let mut topo_order = Vec::with_capacity(dag.tasks.len());
        while let Some(std::cmp::Reverse((_, i))) = ready.pop() {
            topo_order.push(i);
            for output in &dag.tasks[i].outputs {
                for &j in &consumers[file_pos[output]] {
                    remaining[j] -= 1;
                    if remaining[j] == 0 {
                        ready.push(std::cmp::Reverse((dag.tasks[j].id, j)));
                    }
                }
            }
        }

        Ok(DagIndex { task_pos, file_pos, consumers, unmet_deps, topo_order })
    }
}

/// Sum of a task's input artifact sizes in gigabytes.
pub fn total_input_gb(dag: &WorkflowDag, index: &DagIndex, task: &TaskInstance) -> f64 {
    task.inputs.iter().map(|f| dag.files[index.file_pos[f]].size_gb).sum()
}

/// Gigabytes the task's tool actually processes (compute-relevant input).
pub fn compute_input_gb(dag: &WorkflowDag, index: &DagIndex, task: &TaskInstance) -> f64 {
    task.compute_input_gb.unwrap_or_else(|| total_input_gb(dag, index, task))
}
