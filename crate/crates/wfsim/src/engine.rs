//! Deterministic discrete-event execution of a workflow DAG on a cluster.
//!
//! Time is continuous (floating seconds). Every running piece of work is an
//! activity: an input fetch, a local working-directory copy, the compute
//! itself, or an output publish. Transfers on one node share its link
//! fairly; compute on one node slows down collectively while the node is
//! oversubscribed. Rates therefore only change at events, and every rate
//! change settles accrued progress before rescheduling finish events.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::calibrate::ProfileSet;
use crate::infra::{ClusterSpec, FsRegime, FsState, NodeId};
use crate::sched::{select, Assignment, NodeLoad, Policy, PolicyKind, ReadyQueue, SchedContext};
use crate::workflow::{
    signature, DagIndex, Signature, TaskId, TaskTemplate, ThreadModel, WorkflowDag,
};

/// What happens when admitted work exceeds a node's capacity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Oversubscription {
    /// Scheduler never admits beyond capacity.
    Forbid,
    /// Admission may exceed capacity; compute on the node is stretched by
    /// `mem_spill_factor` while memory is oversubscribed and by
    /// demanded/available while threads are (if `thread_share`).
    Penalize { mem_spill_factor: f64, thread_share: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub cache_enabled: bool,
    pub oversubscription: Oversubscription,
    /// Reserved; results do not depend on it.
    #[serde(default)]
    pub random_seed: u64,
    /// Per-GB latency of the per-task working-directory copy on local-only
    /// systems. Zero disables the model.
    #[serde(default)]
    pub local_copy_s_per_gb: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            cache_enabled: true,
            oversubscription: Oversubscription::Penalize {
                mem_spill_factor: 10.0,
                thread_share: true,
            },
            random_seed: 0,
            local_copy_s_per_gb: 0.0,
        }
    }
}

/// One completed invocation in the trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry {
    pub task: TaskId,
    /// Index into [`SimTrace::template_names`].
    pub template: u16,
    pub node: NodeId,
    pub start_s: f64,
    pub end_s: f64,
    pub threads: u32,
    pub staged_in_gb: f64,
    pub staged_out_gb: f64,
    pub cache_hit: bool,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SimTrace {
    pub template_names: Vec<String>,
    pub entries: Vec<TraceEntry>,
}

impl SimTrace {
    pub fn template_name(&self, entry: &TraceEntry) -> &str {
        &self.template_names[entry.template as usize]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TemplateStats {
    pub count: u64,
    pub cpu_hours: f64,
    pub staged_in_gb: f64,
    pub staged_out_gb: f64,
    pub cache_hits: u64,
}

/// Cost-relevant facts about the run, carried so reports are self-contained.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostContext {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acquisition_cost_eur: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_run_rental_eur: Option<f64>,
    pub node_count: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment_node_cap: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub system: String,
    pub makespan_h: f64,
    pub per_template: BTreeMap<String, TemplateStats>,
    /// Busy thread-seconds over capacity thread-seconds, per node.
    pub per_node_utilization: Vec<f64>,
    pub cache_hits: u64,
    pub total_network_gb: f64,
    pub cost_context: CostContext,
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid DAG: {0}")]
    InvalidDag(String),
    #[error("no template definition for {0:?}")]
    MissingTemplate(String),
    #[error("task {task} cannot run anywhere: {reason}")]
    Unschedulable { task: TaskId, reason: String },
    #[error("{template:?} cannot run with {threads} threads")]
    BadThreadCount { template: String, threads: u32 },
    #[error("cluster has no network but the file-system regime requires transfers")]
    NoNetwork,
    #[error("simulation stalled with {0} tasks unfinished")]
    Stalled(usize),
}

/// Compute seconds of one invocation: serial part plus parallel part divided
/// across the allotted threads. Non-increasing in `threads_k`.
pub fn task_duration_s(
    template: &TaskTemplate,
    threads_k: u32,
    input_gb: f64,
) -> Result<f64, SimError> {
    if threads_k < 1 || threads_k > template.threads.max_threads() {
        return Err(SimError::BadThreadCount {
            template: template.name.clone(),
            threads: threads_k,
        });
    }
    Ok(template.work.serial_s + template.work.parallel_s_per_gb * input_gb / threads_k as f64)
}

/// Serialized trace rows: `task_id,template,node,start_s,end_s,threads,cache_hit`,
/// LF line endings, sorted by start time then task id.
pub fn export_trace_csv(trace: &SimTrace) -> String {
    let mut rows: Vec<&TraceEntry> = trace.entries.iter().collect();
    rows.sort_by(|a, b| a.start_s.total_cmp(&b.start_s).then(a.task.cmp(&b.task)));
    let mut out = String::with_capacity(64 + rows.len() * 48);
    out.push_str("task_id,template,node,start_s,end_s,threads,cache_hit\n");
    for e in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            e.task,
            trace.template_name(e),
            e.node,
            e.start_s,
            e.end_s,
            e.threads,
            e.cache_hit
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Engine internals
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
enum ActKind {
    /// Staging all of a task's missing inputs (inbound) or all of its
    /// outputs (outbound) over the node link as one stream, the way the
    /// wrapper script reads everything before and writes everything after
    /// the tool runs.
    Transfer { size_gb: f64, inbound: bool },
    /// Local working-directory copy before compute.
    Delay,
    Compute,
}

#[derive(Debug)]
struct Activity {
    task_pos: u32,
    node_pos: u32,
    kind: ActKind,
    /// GB left for transfers, seconds of work left otherwise.
    remaining: f64,
    gen: u32,
    group_slot: usize,
    done: bool,
}

struct Group {
    active: Vec<u32>,
    last_settle: f64,
}

impl Group {
    fn new() -> Self {
        Group { active: Vec::new(), last_settle: 0.0 }
    }
}

struct NodeRt {
    id: NodeId,
    threads_cap: u32,
    mem_cap: f64,
    threads_demand: u32,
    mem_demand: f64,
    compute: Group,
    link: Group,
    compute_rate: f64,
    link_rate: f64,
    busy_thread_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum TaskState {
    Blocked,
    Ready,
    Parked,
    Running,
    Done,
}

struct TaskRt {
    state: TaskState,
    unmet_deps: u32,
    node_pos: u32,
    threads: u32,
    mem_gb: f64,
    start_s: f64,
    staged_in_gb: f64,
    staged_out_gb: f64,
}

#[derive(Debug)]
enum CacheState {
    Running { waiters: Vec<u32> },
    Done { node_pos: u32 },
}

struct HeapEv {
    time: f64,
    seq: u64,
    act: u32,
    gen: u32,
}

impl PartialEq for HeapEv {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl Eq for HeapEv {}
impl PartialOrd for HeapEv {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEv {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.time.total_cmp(&other.time).then(self.seq.cmp(&other.seq))
    }
}

struct Engine<'a> {
    dag: &'a WorkflowDag,
    index: &'a DagIndex,
    cluster: &'a ClusterSpec,
    policy: &'a Policy,
    options: &'a SimOptions,
    templates: Vec<TaskTemplate>,
    template_of: Vec<u16>,
    task_input_gb: Vec<f64>,
    task_compute_gb: Vec<f64>,
    task_mem_gb: Vec<f64>,

    tasks: Vec<TaskRt>,
    nodes: Vec<NodeRt>,
    loads: Vec<NodeLoad>,
    fs: FsState,
    ready: ReadyQueue,
    cache: HashMap<Signature, CacheState>,
    signatures: Vec<Option<Signature>>,

    activities: Vec<Activity>,
    heap: BinaryHeap<Reverse<HeapEv>>,
    seq: u64,
    trace: Vec<TraceEntry>,
    finished: usize,
}

/// Runs the DAG to completion and returns the trace plus aggregate report.
pub fn simulate(
    dag: &WorkflowDag,
    cluster: &ClusterSpec,
    policy: &Policy,
    profiles: &ProfileSet,
    options: &SimOptions,
) -> Result<(SimTrace, RunReport), SimError> {
    let index = DagIndex::build(dag).map_err(|violations| {
        SimError::InvalidDag(
            violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "),
        )
    })?;

    // Profile constants override the template table baked into the DAG.
    let mut names: Vec<String> = dag.templates.keys().cloned().collect();
    names.sort();
    let mut templates = Vec::with_capacity(names.len());
    let mut template_pos: HashMap<&str, u16> = HashMap::new();
    for name in &names {
        let resolved = profiles
            .template(name)
            .or_else(|| dag.templates.get(name))
            .ok_or_else(|| SimError::MissingTemplate(name.clone()))?;
        template_pos.insert(name.as_str(), templates.len() as u16);
        templates.push(resolved.clone());
    }

    if matches!(cluster.fs_regime, FsRegime::SharedPosix | FsRegime::StagedDfs)
        && cluster.network_gbit <= 0.0
    {
        return Err(SimError::NoNetwork);
    }
    if let PolicyKind::LocalMaxConcurrency { k } = policy.kind {
        if k < 1 {
            return Err(SimError::Unschedulable {
                task: TaskId(0),
                reason: "max concurrency 0 admits nothing".into(),
            });
        }
    }

    let n = dag.tasks.len();
    let mut template_of = Vec::with_capacity(n);
    let mut task_input_gb = Vec::with_capacity(n);
    let mut task_compute_gb = Vec::with_capacity(n);
    let mut task_mem_gb = Vec::with_capacity(n);
    let max_threads = cluster.nodes.iter().map(|x| x.threads).max().unwrap_or(0);
    let max_mem = cluster.nodes.iter().map(|x| x.mem_gb).fold(0.0, f64::max);
    for task in &dag.tasks {
        let tp = template_pos[task.template.as_str()];
        let template = &templates[tp as usize];
        let input_gb = crate::workflow::total_input_gb(dag, &index, task);
        let mem = template.memory.required_gb(input_gb);
        if mem > max_mem {
            return Err(SimError::Unschedulable {
                task: task.id,
                reason: format!("needs {mem} GB, largest node has {max_mem} GB"),
            });
        }
        if let ThreadModel::Fixed { n: need } = template.threads {
            if need > max_threads {
                return Err(SimError::Unschedulable {
                    task: task.id,
                    reason: format!("needs {need} threads, largest node has {max_threads}"),
                });
            }
        }
        template_of.push(tp);
        task_input_gb.push(input_gb);
        task_compute_gb.push(crate::workflow::compute_input_gb(dag, &index, task));
        task_mem_gb.push(mem);
    }

    let nodes: Vec<NodeRt> = cluster
        .nodes
        .iter()
        .map(|spec| NodeRt {
            id: spec.id,
            threads_cap: spec.threads,
            mem_cap: spec.mem_gb,
            threads_demand: 0,
            mem_demand: 0.0,
            compute: Group::new(),
            link: Group::new(),
            compute_rate: 1.0,
            link_rate: cluster.network_gbit / 8.0,
            busy_thread_seconds: 0.0,
        })
        .collect();
    let loads: Vec<NodeLoad> = cluster.nodes.iter().map(|s| NodeLoad::empty(s.id)).collect();

    let mut fs = FsState::new();
    if cluster.fs_regime == FsRegime::StagedDfs {
        // Workflow inputs are spread round-robin, the way initial data lands
        // on a distributed store.
        let mut i = 0usize;
        for file in dag.files.iter().filter(|f| f.producer.is_none()) {
            fs.add_replica(file.id, cluster.nodes[i % cluster.nodes.len()].id);
            i += 1;
        }
    }

    let mut tasks: Vec<TaskRt> = (0..n)
        .map(|i| TaskRt {
            state: TaskState::Blocked,
            unmet_deps: index.unmet_deps[i] as u32,
            node_pos: 0,
            threads: 0,
            mem_gb: 0.0,
            start_s: 0.0,
            staged_in_gb: 0.0,
            staged_out_gb: 0.0,

        })
        .collect();

    let cache_on = options.cache_enabled;
    let signatures: Vec<Option<Signature>> = dag
        .tasks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            (cache_on && templates[template_of[i] as usize].deterministic)
                .then(|| signature(t))
        })
        .collect();

    let mut ready = ReadyQueue::new();
    for (i, rt) in tasks.iter_mut().enumerate() {
        if rt.unmet_deps == 0 {
            rt.state = TaskState::Ready;
            ready.insert(&dag.tasks[i].template, dag.tasks[i].id, i);
        }
    }

    let mut engine = Engine {
        dag,
        index: &index,
        cluster,
        policy,
        options,
        templates,
        template_of,
        task_input_gb,
        task_compute_gb,
        task_mem_gb,
        tasks,
        nodes,
        loads,
        fs,
        ready,
        cache: HashMap::new(),
        signatures,
        activities: Vec::new(),
        heap: BinaryHeap::new(),
        seq: 0,
        trace: Vec::with_capacity(n),
        finished: 0,
    };
    engine.run()?;

    let trace = SimTrace { template_names: names, entries: engine.trace };
    let report = build_report(dag, cluster, policy, &trace);
    Ok((trace, report))
}

impl<'a> Engine<'a> {
    fn run(&mut self) -> Result<(), SimError> {
        self.schedule(0.0)?;
        while let Some(Reverse(ev)) = self.heap.pop() {
            let act = &self.activities[ev.act as usize];
            if act.done || act.gen != ev.gen {
                continue;
            }
            let now = ev.time;
            self.complete_activity(ev.act, now)?;
            let quiescent = match self.heap.peek() {
                None => true,
                Some(Reverse(next)) => {
                    let a = &self.activities[next.act as usize];
                    next.time > now || a.done || a.gen != next.gen
                }
            };
            if quiescent {
                self.schedule(now)?;
            }
        }
        if self.finished != self.dag.tasks.len() {
            return Err(SimError::Stalled(self.dag.tasks.len() - self.finished));
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Rates and settling
    // ------------------------------------------------------------------

    fn compute_rate(&self, node_pos: usize) -> f64 {
        let node = &self.nodes[node_pos];
        match self.options.oversubscription {
            Oversubscription::Forbid => 1.0,
            Oversubscription::Penalize { mem_spill_factor, thread_share } => {
                let mut stretch = 1.0;
                if thread_share && node.threads_demand > node.threads_cap {
                    stretch *= node.threads_demand as f64 / node.threads_cap as f64;
                }
                if node.mem_demand > node.mem_cap + 1e-9 {
                    stretch *= mem_spill_factor;
                }
                1.0 / stretch
            }
        }
    }

    fn settle_compute(&mut self, node_pos: usize, now: f64) {
        let rate = self.nodes[node_pos].compute_rate;
        let group = &mut self.nodes[node_pos].compute;
        let dt = now - group.last_settle;
        if dt > 0.0 {
            for &a in &group.active {
                self.activities[a as usize].remaining -= rate * dt;
            }
        }
        group.last_settle = now;
    }

    fn settle_link(&mut self, node_pos: usize, now: f64) {
        let node = &self.nodes[node_pos];
        let share = node.link.active.len();
        let rate = if share == 0 { 0.0 } else { node.link_rate / share as f64 };
        let group = &mut self.nodes[node_pos].link;
        let dt = now - group.last_settle;
        if dt > 0.0 && share > 0 {
            for &a in &group.active {
                self.activities[a as usize].remaining -= rate * dt;
            }
        }
        group.last_settle = now;
    }

    fn push_event(&mut self, act_idx: u32, time: f64) {
        self.seq += 1;
        let gen = self.activities[act_idx as usize].gen;
        self.heap.push(Reverse(HeapEv { time, seq: self.seq, act: act_idx, gen }));
    }

    /// Re-issues finish events for every member of the node's compute group
    /// after a rate change.
    fn reschedule_compute(&mut self, node_pos: usize, now: f64) {
        let new_rate = self.compute_rate(node_pos);
        if new_rate == self.nodes[node_pos].compute_rate {
            return;
        }
        self.settle_compute(node_pos, now);
        self.nodes[node_pos].compute_rate = new_rate;
        let members: Vec<u32> = self.nodes[node_pos].compute.active.clone();
        for a in members {
            let act = &mut self.activities[a as usize];
            act.gen += 1;
            let eta = now + (act.remaining.max(0.0)) / new_rate;
            self.push_event(a, eta);
        }
    }

    /// Re-issues finish events for every transfer on the node link after the
    /// share count changed.
    fn reschedule_link(&mut self, node_pos: usize, now: f64) {
        let share = self.nodes[node_pos].link.active.len();
        if share == 0 {
            return;
        }
        let rate = self.nodes[node_pos].link_rate / share as f64;
        let members: Vec<u32> = self.nodes[node_pos].link.active.clone();
        for a in members {
            let act = &mut self.activities[a as usize];
            act.gen += 1;
            let eta = now + (act.remaining.max(0.0)) / rate;
            self.push_event(a, eta);
        }
    }

    // ------------------------------------------------------------------
    // Activity lifecycle
    // ------------------------------------------------------------------

    fn add_compute(&mut self, task_pos: u32, node_pos: usize, work_s: f64, now: f64) {
        self.settle_compute(node_pos, now);
        let idx = self.activities.len() as u32;
        let slot = self.nodes[node_pos].compute.active.len();
        self.activities.push(Activity {
            task_pos,
            node_pos: node_pos as u32,
            kind: ActKind::Compute,
            remaining: work_s,
            gen: 0,
            group_slot: slot,
            done: false,
        });
        self.nodes[node_pos].compute.active.push(idx);
        let rate = self.nodes[node_pos].compute_rate;
        self.push_event(idx, now + work_s / rate);
    }

    fn add_transfer(&mut self, task_pos: u32, node_pos: usize, size_gb: f64, inbound: bool, now: f64) {
        self.settle_link(node_pos, now);
        let idx = self.activities.len() as u32;
        let slot = self.nodes[node_pos].link.active.len();
        self.activities.push(Activity {
            task_pos,
            node_pos: node_pos as u32,
            kind: ActKind::Transfer { size_gb, inbound },
            remaining: size_gb,
            gen: 0,
            group_slot: slot,
            done: false,
        });
        self.nodes[node_pos].link.active.push(idx);
        self.reschedule_link(node_pos, now);
        // reschedule_link bumped every member including the new one.
    }

    fn add_delay(&mut self, task_pos: u32, node_pos: usize, seconds: f64, now: f64) {
        let idx = self.activities.len() as u32;
        self.activities.push(Activity {
            task_pos,
            node_pos: node_pos as u32,
            kind: ActKind::Delay,
            remaining: seconds,
            gen: 0,
            group_slot: usize::MAX,
            done: false,
        });
        self.push_event(idx, now + seconds);
    }

    fn remove_from_group(&mut self, act_idx: u32, now: f64) {
        let (node_pos, kind, slot) = {
            let act = &self.activities[act_idx as usize];
            (act.node_pos as usize, act.kind, act.group_slot)
        };
        match kind {
            ActKind::Compute => {
                self.settle_compute(node_pos, now);
                let group = &mut self.nodes[node_pos].compute;
                group.active.swap_remove(slot);
                if let Some(&moved) = group.active.get(slot) {
                    self.activities[moved as usize].group_slot = slot;
                }
                // Compute rate does not depend on membership, only on demand.
            }
            ActKind::Transfer { .. } => {
                self.settle_link(node_pos, now);
                let group = &mut self.nodes[node_pos].link;
                group.active.swap_remove(slot);
                if let Some(&moved) = group.active.get(slot) {
                    self.activities[moved as usize].group_slot = slot;
                }
                self.reschedule_link(node_pos, now);
            }
            ActKind::Delay => {}
        }
    }

    fn complete_activity(&mut self, act_idx: u32, now: f64) -> Result<(), SimError> {
        let (task_pos, kind) = {
            let act = &self.activities[act_idx as usize];
            (act.task_pos, act.kind)
        };
        {
            // Settle so the group accounting is exact, then retire.
            let node_pos = self.activities[act_idx as usize].node_pos as usize;
            match kind {
                ActKind::Compute => {
                    self.settle_compute(node_pos, now);
                    debug_assert!(self.activities[act_idx as usize].remaining < 1e-6);
                }
                ActKind::Transfer { .. } => {
                    self.settle_link(node_pos, now);
                    debug_assert!(self.activities[act_idx as usize].remaining < 1e-6);
                }
                ActKind::Delay => {}
            }
            self.activities[act_idx as usize].done = true;
        }
        self.remove_from_group(act_idx, now);

        let node_pos = self.activities[act_idx as usize].node_pos as usize;
        match kind {
            ActKind::Transfer { size_gb, inbound } => {
                if inbound {
                    self.tasks[task_pos as usize].staged_in_gb += size_gb;
                    if self.cluster.fs_regime == FsRegime::StagedDfs {
                        // Every staged-in input now has a local replica.
                        let node_id = self.nodes[node_pos].id;
                        let inputs = self.dag.tasks[task_pos as usize].inputs.clone();
                        for file in inputs {
                            self.fs.add_replica(file, node_id);
                        }
                    }
                    self.begin_compute(task_pos, now)?;
                } else {
                    self.tasks[task_pos as usize].staged_out_gb += size_gb;
                    self.finish_task(task_pos, now)?;
                }
            }
            ActKind::Delay => {
                self.begin_compute(task_pos, now)?;
            }
            ActKind::Compute => {
                self.begin_publish(task_pos, now)?;
            }
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Task lifecycle
    // ------------------------------------------------------------------

    fn start_task(&mut self, a: &Assignment, now: f64) -> Result<(), SimError> {
        let task_pos = a.task_pos;
        let node_pos = self.cluster.nodes.iter().position(|x| x.id == a.node).unwrap();
        let mem = self.task_mem_gb[task_pos];
        {
            let rt = &mut self.tasks[task_pos];
            rt.state = TaskState::Running;
            rt.node_pos = node_pos as u32;
            rt.threads = a.threads;
            rt.mem_gb = mem;
            rt.start_s = now;

        }
        self.nodes[node_pos].threads_demand += a.threads;
        self.nodes[node_pos].mem_demand += mem;
        self.loads[node_pos].threads_in_use += a.threads;
        self.loads[node_pos].mem_gb_in_use += mem;
        self.loads[node_pos].running.push(self.dag.tasks[task_pos].id);
        self.reschedule_compute(node_pos, now);

        match self.cluster.fs_regime {
            FsRegime::LocalOnly => {
                let copy_s = self.options.local_copy_s_per_gb * self.task_input_gb[task_pos];
                if copy_s > 0.0 {
                    self.add_delay(task_pos as u32, node_pos, copy_s, now);
                } else {
                    self.begin_compute(task_pos as u32, now)?;
                }
            }
            FsRegime::SharedPosix | FsRegime::StagedDfs => {
                let node_id = self.nodes[node_pos].id;
                let (fetch, _) = crate::infra::stage_plan(
                    self.dag,
                    self.index,
                    &self.dag.tasks[task_pos],
                    node_id,
                    &self.fs,
                    self.cluster.fs_regime,
                )
                .map_err(|e| SimError::InvalidDag(e.to_string()))?;
                let total_gb: f64 = fetch.iter().map(|t| t.size_gb).sum();
                if total_gb > 0.0 {
                    self.add_transfer(task_pos as u32, node_pos, total_gb, true, now);
                } else {
                    // Zero-byte inputs still gain a local replica.
                    if self.cluster.fs_regime == FsRegime::StagedDfs {
                        for t in &fetch {
                            self.fs.add_replica(t.file, node_id);
                        }
                    }
                    self.begin_compute(task_pos as u32, now)?;
                }
            }
        }
        Ok(())
    }

    fn begin_compute(&mut self, task_pos: u32, now: f64) -> Result<(), SimError> {
        let tp = self.template_of[task_pos as usize] as usize;
        let template = &self.templates[tp];
        let threads = self.tasks[task_pos as usize].threads;
        let work = task_duration_s(template, threads, self.task_compute_gb[task_pos as usize])?;
        let node_pos = self.tasks[task_pos as usize].node_pos as usize;
        if work > 0.0 {
            self.add_compute(task_pos, node_pos, work, now);
        } else {
            self.begin_publish(task_pos, now)?;
        }
        Ok(())
    }

    fn begin_publish(&mut self, task_pos: u32, now: f64) -> Result<(), SimError> {
        let node_pos = self.tasks[task_pos as usize].node_pos as usize;
        match self.cluster.fs_regime {
            FsRegime::LocalOnly => self.finish_task(task_pos, now)?,
            FsRegime::SharedPosix | FsRegime::StagedDfs => {
                let task = &self.dag.tasks[task_pos as usize];
                let total_gb: f64 = task
                    .outputs
                    .iter()
                    .map(|o| self.dag.files[self.index.file_pos[o]].size_gb)
                    .sum();
                if total_gb > 0.0 {
                    self.add_transfer(task_pos, node_pos, total_gb, false, now);
                } else {
                    self.finish_task(task_pos, now)?;
                }
            }
        }
        Ok(())
    }

    fn finish_task(&mut self, task_pos: u32, now: f64) -> Result<(), SimError> {
        let i = task_pos as usize;
        let node_pos = self.tasks[i].node_pos as usize;
        let (threads, mem, start_s) =
            (self.tasks[i].threads, self.tasks[i].mem_gb, self.tasks[i].start_s);

        if self.cluster.fs_regime == FsRegime::StagedDfs {
            let node_id = self.nodes[node_pos].id;
            for output in &self.dag.tasks[i].outputs {
                self.fs.add_replica(*output, node_id);
            }
        }

        self.nodes[node_pos].threads_demand -= threads;
        self.nodes[node_pos].mem_demand -= mem;
        self.nodes[node_pos].busy_thread_seconds += threads as f64 * (now - start_s);
        self.loads[node_pos].threads_in_use -= threads;
        self.loads[node_pos].mem_gb_in_use -= mem;
        let id = self.dag.tasks[i].id;
        self.loads[node_pos].running.retain(|t| *t != id);
        self.reschedule_compute(node_pos, now);

        self.trace.push(TraceEntry {
            task: id,
            template: self.template_of[i],
            node: self.nodes[node_pos].id,
            start_s,
            end_s: now,
            threads,
            staged_in_gb: self.tasks[i].staged_in_gb,
            staged_out_gb: self.tasks[i].staged_out_gb,
            cache_hit: false,
        });
        self.tasks[i].state = TaskState::Done;
        self.finished += 1;

        let mut worklist: VecDeque<u32> = VecDeque::new();
        if let Some(sig) = self.signatures[i].clone() {
            let waiters = match self.cache.insert(sig, CacheState::Done { node_pos: node_pos as u32 }) {
                Some(CacheState::Running { waiters }) => waiters,
                _ => Vec::new(),
            };
            for w in waiters {
                worklist.push_back(w);
            }
        }
        self.propagate_outputs(i, &mut worklist);
        self.drain_instant(worklist, now)?;
        Ok(())
    }

    /// Completes cache-hit tasks at `now` without consuming any resources,
    /// cascading through their consumers.
    fn drain_instant(&mut self, mut worklist: VecDeque<u32>, now: f64) -> Result<(), SimError> {
        while let Some(task_pos) = worklist.pop_front() {
            let i = task_pos as usize;
            debug_assert!(matches!(self.tasks[i].state, TaskState::Parked | TaskState::Ready));
            let origin = match self.signatures[i].as_ref().and_then(|s| self.cache.get(s)) {
                Some(CacheState::Done { node_pos }) => *node_pos as usize,
                _ => {
                    return Err(SimError::Stalled(1));
                }
            };
            if self.tasks[i].state == TaskState::Ready {
                self.ready.remove(&self.dag.tasks[i].template, self.dag.tasks[i].id, i);
            }
            self.tasks[i].state = TaskState::Done;
            self.finished += 1;
            let node_id = self.nodes[origin].id;
            if self.cluster.fs_regime == FsRegime::StagedDfs {
                // Reused outputs sit where the original run published them.
                for output in &self.dag.tasks[i].outputs {
                    self.fs.add_replica(*output, node_id);
                }
            }
            self.trace.push(TraceEntry {
                task: self.dag.tasks[i].id,
                template: self.template_of[i],
                node: node_id,
                start_s: now,
                end_s: now,
                threads: 0,
                staged_in_gb: 0.0,
                staged_out_gb: 0.0,
                cache_hit: true,
            });
            self.propagate_outputs(i, &mut worklist);
        }
        Ok(())
    }

    /// Marks consumers of the task's outputs ready; ready tasks whose
    /// signature is already resolved complete instantly (appended to the
    /// worklist) or park on the running instance.
    fn propagate_outputs(&mut self, task_pos: usize, instant: &mut VecDeque<u32>) {
        for output in &self.dag.tasks[task_pos].outputs {
            let fp = self.index.file_pos[output];
            for &consumer in &self.index.consumers[fp] {
                self.tasks[consumer].unmet_deps -= 1;
                if self.tasks[consumer].unmet_deps == 0 {
                    debug_assert_eq!(self.tasks[consumer].state, TaskState::Blocked);
                    match self.cache_state_of(consumer) {
                        Some(true) => {
                            // Drained immediately by the caller.
                            self.tasks[consumer].state = TaskState::Ready;
                            instant.push_back(consumer as u32);
                        }
                        Some(false) => {
                            self.tasks[consumer].state = TaskState::Parked;
                            self.park(consumer);
                        }
                        None => {
                            self.tasks[consumer].state = TaskState::Ready;
                            self.ready.insert(
                                &self.dag.tasks[consumer].template,
                                self.dag.tasks[consumer].id,
                                consumer,
                            );
                        }
                    }
                }
            }
        }
    }

    /// None: no cache entry. Some(true): done. Some(false): running.
    fn cache_state_of(&self, task_pos: usize) -> Option<bool> {
        let sig = self.signatures[task_pos].as_ref()?;
        match self.cache.get(sig) {
            Some(CacheState::Done { .. }) => Some(true),
            Some(CacheState::Running { .. }) => Some(false),
            None => None,
        }
    }

    fn park(&mut self, task_pos: usize) {
        let sig = self.signatures[task_pos].clone().unwrap();
        match self.cache.get_mut(&sig) {
            Some(CacheState::Running { waiters }) => waiters.push(task_pos as u32),
            _ => unreachable!("parked on a non-running signature"),
        }
    }

    // ------------------------------------------------------------------
    // Scheduling
    // ------------------------------------------------------------------

    fn schedule(&mut self, now: f64) -> Result<(), SimError> {
        loop {
            if self.ready.is_empty() {
                return Ok(());
            }
            let ctx = SchedContext {
                dag: self.dag,
                index: self.index,
                cluster: self.cluster,
                fs: &self.fs,
                strict: matches!(self.options.oversubscription, Oversubscription::Forbid),
            };
            let assignments = select(&ctx, &self.ready, &self.loads, self.policy);
            if assignments.is_empty() {
                return Ok(());
            }
            let mut instant: VecDeque<u32> = VecDeque::new();
            for a in &assignments {
                let i = a.task_pos;
                let task = &self.dag.tasks[i];
                self.ready.remove(&task.template, task.id, i);
                // Another instance of the same invocation may have started or
                // finished since this one became ready.
                match self.cache_state_of(i) {
                    Some(true) => {
                        instant.push_back(i as u32);
                    }
                    Some(false) => {
                        self.tasks[i].state = TaskState::Parked;
                        self.park(i);
                    }
                    None => {
                        if let Some(sig) = self.signatures[i].clone() {
                            self.cache.insert(sig, CacheState::Running { waiters: Vec::new() });
                        }
                        self.start_task(a, now)?;
                    }
                }
            }
            self.drain_instant(instant, now)?;
        }
    }
}

fn build_report(
    dag: &WorkflowDag,
    cluster: &ClusterSpec,
    policy: &Policy,
    trace: &SimTrace,
) -> RunReport {
    let makespan_s = trace.entries.iter().map(|e| e.end_s).fold(0.0, f64::max);
    let mut per_template: BTreeMap<String, TemplateStats> = BTreeMap::new();
    let mut cache_hits = 0u64;
    let mut total_network_gb = 0.0;
    let mut busy = vec![0.0f64; cluster.nodes.len()];
    let node_pos: HashMap<NodeId, usize> =
        cluster.nodes.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
    for e in &trace.entries {
        let stats = per_template.entry(trace.template_name(e).to_string()).or_default();
        stats.count += 1;
        stats.cpu_hours += e.threads as f64 * (e.end_s - e.start_s) / 3600.0;
        stats.staged_in_gb += e.staged_in_gb;
        stats.staged_out_gb += e.staged_out_gb;
        if e.cache_hit {
            stats.cache_hits += 1;
            cache_hits += 1;
        }
        total_network_gb += e.staged_in_gb + e.staged_out_gb;
        busy[node_pos[&e.node]] += e.threads as f64 * (e.end_s - e.start_s);
    }
    let per_node_utilization = cluster
        .nodes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if makespan_s > 0.0 {
                busy[i] / (s.threads as f64 * makespan_s)
            } else {
                0.0
            }
        })
        .collect();
    let _ = dag;
    RunReport {
        system: cluster.name.clone(),
        makespan_h: makespan_s / 3600.0,
        per_template,
        per_node_utilization,
        cache_hits,
        total_network_gb,
        cost_context: CostContext {
            acquisition_cost_eur: cluster.acquisition_cost_eur,
            per_run_rental_eur: cluster.per_run_rental_eur,
            node_count: cluster.nodes.len() as u32,
            alignment_node_cap: policy.alignment_node_cap,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrate::seed_profile;
    use crate::infra::preset;
    use crate::sched::PolicyKind;
    use crate::workflow::{
        FileArtifact, FileId, MemoryModel, OutputSizeModel, TaskInstance, WorkModel,
    };

    fn forbid() -> SimOptions {
        SimOptions {
            cache_enabled: false,
            oversubscription: Oversubscription::Forbid,
            random_seed: 0,
            local_copy_s_per_gb: 0.0,
        }
    }

    fn hour_template(name: &str, mem_gb: f64) -> TaskTemplate {
        TaskTemplate {
            name: name.into(),
            threads: ThreadModel::Fixed { n: 1 },
            memory: MemoryModel::Fixed { gb: mem_gb },
            work: WorkModel { serial_s: 3600.0, parallel_s_per_gb: 0.0 },
            deterministic: true,
            output_size: OutputSizeModel { fixed_gb: 0.0, per_input_gb: 0.0 },
        }
    }

    fn one_node_cluster(threads: u32, mem_gb: f64) -> ClusterSpec {
        ClusterSpec {
            name: "test".into(),
            nodes: vec![crate::infra::NodeSpec {
                id: NodeId(0),
                threads,
                mem_gb,
                class_label: "test".into(),
            }],
            network_gbit: 0.0,
            fs_regime: FsRegime::LocalOnly,
            acquisition_cost_eur: None,
            per_run_rental_eur: None,
        }
    }

    #[test]
    fn duration_law() {
        let mut t = hour_template("t", 1.0);
        t.threads = ThreadModel::Configurable { max: 8 };
        t.work = WorkModel { serial_s: 10.0, parallel_s_per_gb: 90.0 };
        assert_eq!(task_duration_s(&t, 3, 1.0).unwrap(), 40.0);
        assert_eq!(task_duration_s(&t, 1, 1.0).unwrap(), 100.0);
        t.work.parallel_s_per_gb = 0.0;
        for k in 1..=8 {
            assert_eq!(task_duration_s(&t, k, 5.0).unwrap(), 10.0);
        }
        assert!(task_duration_s(&t, 9, 1.0).is_err());
        assert!(task_duration_s(&t, 0, 1.0).is_err());
    }

    #[test]
    fn duration_is_non_increasing_in_threads() {
        let mut t = hour_template("t", 1.0);
        t.threads = ThreadModel::Configurable { max: 32 };
        t.work = WorkModel { serial_s: 7.0, parallel_s_per_gb: 123.0 };
        let mut last = f64::INFINITY;
        for k in 1..=32 {
            let d = task_duration_s(&t, k, 3.7).unwrap();
            assert!(d <= last);
            last = d;
        }
    }

    #[test]
    fn empty_dag_has_zero_makespan() {
        let dag = WorkflowDag::default();
        let cluster = preset("SA").unwrap();
        let (trace, report) = simulate(
            &dag,
            &cluster,
            &Policy::new(PolicyKind::LocalMemoryAware),
            &seed_profile(),
            &forbid(),
        )
        .unwrap();
        assert!(trace.entries.is_empty());
        assert_eq!(report.makespan_h, 0.0);
    }

    /// Two independent 1 h tasks, 10 GB memory each, on a 16 GB 2-thread
    /// node: memory admits only one at a time, so they serialize.
    #[test]
    fn memory_serializes_two_tasks() {
        let mut dag = WorkflowDag::default();
        dag.templates.insert("t".into(), hour_template("t", 10.0));
        for i in 0..2 {
            dag.tasks.push(TaskInstance {
                id: TaskId(i),
                template: "t".into(),
                inputs: vec![],
                params: vec![],
                outputs: vec![],
                compute_input_gb: None,
            });
        }
        let cluster = one_node_cluster(2, 16.0);
        let (trace, report) = simulate(
            &dag,
            &cluster,
            &Policy::new(PolicyKind::LocalMemoryAware),
            &seed_profile(),
            &forbid(),
        )
        .unwrap();
        assert_eq!(trace.entries.len(), 2);
        assert!((report.makespan_h - 2.0).abs() < 1e-9);
    }

    #[test]
    fn unschedulable_task_is_reported() {
        let mut dag = WorkflowDag::default();
        dag.templates.insert("t".into(), hour_template("t", 64.0));
        dag.tasks.push(TaskInstance {
            id: TaskId(0),
            template: "t".into(),
            inputs: vec![],
            params: vec![],
            outputs: vec![],
            compute_input_gb: None,
        });
        let cluster = one_node_cluster(2, 16.0);
        let err = simulate(
            &dag,
            &cluster,
            &Policy::new(PolicyKind::LocalMemoryAware),
            &seed_profile(),
            &forbid(),
        )
        .unwrap_err();
        assert!(matches!(err, SimError::Unschedulable { task, .. } if task == TaskId(0)));
    }

    /// Chain producer -> consumer over a staged DFS: the consumer must wait
    /// for the publish, fetch remotely if placed elsewhere, and dependency
    /// order must hold in the trace.
    #[test]
    fn staged_chain_orders_and_transfers() {
        let mut dag = WorkflowDag::default();
        let mut t = hour_template("t", 1.0);
        t.work.serial_s = 100.0;
        dag.templates.insert("t".into(), t);
        dag.files.push(FileArtifact { id: FileId(0), size_gb: 10.0, producer: Some(TaskId(0)) });
        dag.tasks.push(TaskInstance {
            id: TaskId(0),
            template: "t".into(),
            inputs: vec![],
            params: vec![],
            outputs: vec![FileId(0)],
            compute_input_gb: None,
        });
        dag.tasks.push(TaskInstance {
            id: TaskId(1),
            template: "t".into(),
            inputs: vec![FileId(0)],
            params: vec![],
            outputs: vec![],
            compute_input_gb: None,
        });
        let mut cluster = preset("YC").unwrap();
        cluster.nodes.truncate(2);
        let (trace, report) = simulate(
            &dag,
            &cluster,
            &Policy::new(PolicyKind::SgeLoadBalance),
            &seed_profile(),
            &forbid(),
        )
        .unwrap();
        let e0 = trace.entries.iter().find(|e| e.task == TaskId(0)).unwrap();
        let e1 = trace.entries.iter().find(|e| e.task == TaskId(1)).unwrap();
        assert!(e1.start_s >= e0.end_s);
        // Producer publishes 10 GB at 10 Gbit -> 8 s.
        assert!((e0.end_s - 108.0).abs() < 1e-9, "end {}", e0.end_s);
        assert!(report.total_network_gb >= 10.0);
    }

    /// Identical signatures collapse under caching: second task finishes
    /// instantly as a cache hit even when both are ready simultaneously.
    #[test]
    fn cache_deduplicates_concurrent_identical_tasks() {
        let mut dag = WorkflowDag::default();
        dag.templates.insert("t".into(), hour_template("t", 1.0));
        dag.files.push(FileArtifact { id: FileId(0), size_gb: 1.0, producer: None });
        for i in 0..3 {
            dag.tasks.push(TaskInstance {
                id: TaskId(i),
                template: "t".into(),
                inputs: vec![FileId(0)],
                params: vec![("sample".into(), "s1".into())],
                outputs: vec![],
                compute_input_gb: None,
            });
        }
        let cluster = one_node_cluster(8, 64.0);
        let mut options = forbid();
        options.cache_enabled = true;
        let (trace, report) = simulate(
            &dag,
            &cluster,
            &Policy::new(PolicyKind::LocalMemoryAware),
            &seed_profile(),
            &options,
        )
        .unwrap();
        let hits: Vec<bool> = trace.entries.iter().map(|e| e.cache_hit).collect();
        assert_eq!(hits.iter().filter(|h| **h).count(), 2);
        assert_eq!(report.cache_hits, 2);
        assert!((report.makespan_h - 1.0).abs() < 1e-9);

        // Without the cache all three run.
        options.cache_enabled = false;
        let (trace, _) = simulate(
            &dag,
            &cluster,
            &Policy::new(PolicyKind::LocalMemoryAware),
            &seed_profile(),
            &options,
        )
        .unwrap();
        assert!(trace.entries.iter().all(|e| !e.cache_hit));
    }

    #[test]
    fn nondeterministic_templates_never_cache() {
        let mut dag = WorkflowDag::default();
        let mut t = hour_template("t", 1.0);
        t.deterministic = false;
        dag.templates.insert("t".into(), t);
        for i in 0..2 {
            dag.tasks.push(TaskInstance {
                id: TaskId(i),
                template: "t".into(),
                inputs: vec![],
                params: vec![],
                outputs: vec![],
                compute_input_gb: None,
            });
        }
        let cluster = one_node_cluster(8, 64.0);
        let mut options = forbid();
        options.cache_enabled = true;
        let (trace, _) = simulate(
            &dag,
            &cluster,
            &Policy::new(PolicyKind::LocalMemoryAware),
            &seed_profile(),
            &options,
        )
        .unwrap();
        assert!(trace.entries.iter().all(|e| !e.cache_hit));
    }

    /// Thread oversubscription stretches compute: 2 tasks of 24 demanded
    /// threads on a 34-thread node run at 34/48 speed.
    #[test]
    fn penalize_stretches_thread_oversubscription() {
        let mut dag = WorkflowDag::default();
        let mut t = hour_template("t", 1.0);
        t.threads = ThreadModel::Configurable { max: 24 };
        t.work = WorkModel { serial_s: 0.0, parallel_s_per_gb: 3600.0 * 24.0 };
        dag.templates.insert("t".into(), t);
        dag.files.push(FileArtifact { id: FileId(0), size_gb: 1.0, producer: None });
        for i in 0..2 {
            dag.tasks.push(TaskInstance {
                id: TaskId(i),
                template: "t".into(),
                inputs: vec![FileId(0)],
                params: vec![],
                outputs: vec![],
                compute_input_gb: None,
            });
        }
        let cluster = one_node_cluster(34, 512.0);
        let options = SimOptions {
            cache_enabled: false,
            oversubscription: Oversubscription::Penalize {
                mem_spill_factor: 10.0,
                thread_share: true,
            },
            random_seed: 0,
            local_copy_s_per_gb: 0.0,
        };
        let policy = Policy::new(PolicyKind::SgeLoadBalance).with_thread_default("t", 24);
        let (_, report) = simulate(&dag, &cluster, &policy, &seed_profile(), &options).unwrap();
        // Nominal duration 1 h at 24 threads; stretched by 48/34.
        let expected = 48.0 / 34.0;
        assert!(
            (report.makespan_h - expected).abs() < 1e-9,
            "makespan {} vs {}",
            report.makespan_h,
            expected
        );
    }

    #[test]
    fn memory_spill_penalty_applies() {
        let mut dag = WorkflowDag::default();
        dag.templates.insert("t".into(), hour_template("t", 10.0));
        for i in 0..2 {
            dag.tasks.push(TaskInstance {
                id: TaskId(i),
                template: "t".into(),
                inputs: vec![],
                params: vec![],
                outputs: vec![],
                compute_input_gb: None,
            });
        }
        // 16 GB node, 20 GB demanded: spill factor 10 while both run.
        let cluster = one_node_cluster(4, 16.0);
        let options = SimOptions {
            cache_enabled: false,
            oversubscription: Oversubscription::Penalize {
                mem_spill_factor: 10.0,
                thread_share: true,
            },
            random_seed: 0,
            local_copy_s_per_gb: 0.0,
        };
        let policy = Policy::new(PolicyKind::LocalMaxConcurrency { k: 2 });
        let (_, report) = simulate(&dag, &cluster, &policy, &seed_profile(), &options).unwrap();
        assert!((report.makespan_h - 10.0).abs() < 1e-9, "makespan {}", report.makespan_h);
    }

    #[test]
    fn local_copy_knob_delays_compute() {
        let mut dag = WorkflowDag::default();
        dag.templates.insert("t".into(), hour_template("t", 1.0));
        dag.files.push(FileArtifact { id: FileId(0), size_gb: 10.0, producer: None });
        dag.tasks.push(TaskInstance {
            id: TaskId(0),
            template: "t".into(),
            inputs: vec![FileId(0)],
            params: vec![],
            outputs: vec![],
            compute_input_gb: None,
        });
        let cluster = one_node_cluster(2, 16.0);
        let mut options = forbid();
        options.local_copy_s_per_gb = 36.0;
        let (_, report) = simulate(
            &dag,
            &cluster,
            &Policy::new(PolicyKind::LocalMemoryAware),
            &seed_profile(),
            &options,
        )
        .unwrap();
        // 360 s copy + 3600 s compute.
        assert!((report.makespan_h - 1.1).abs() < 1e-9);
    }

    #[test]
    fn trace_export_is_sorted_and_exact() {
        let trace = SimTrace {
            template_names: vec!["a".into(), "b".into()],
            entries: vec![
                TraceEntry {
                    task: TaskId(2),
                    template: 1,
                    node: NodeId(0),
                    start_s: 5.0,
                    end_s: 9.5,
                    threads: 2,
                    staged_in_gb: 0.0,
                    staged_out_gb: 0.0,
                    cache_hit: false,
                },
                TraceEntry {
                    task: TaskId(1),
                    template: 0,
                    node: NodeId(1),
                    start_s: 0.0,
                    end_s: 5.0,
                    threads: 1,
                    staged_in_gb: 0.0,
                    staged_out_gb: 0.0,
                    cache_hit: true,
                },
            ],
        };
        let csv = export_trace_csv(&trace);
        assert_eq!(
            csv,
            "task_id,template,node,start_s,end_s,threads,cache_hit\n\
             1,a,1,0,5,1,true\n\
             2,b,0,5,9.5,2,false\n"
        );
        let empty = SimTrace::default();
        assert_eq!(export_trace_csv(&empty), "task_id,template,node,start_s,end_s,threads,cache_hit\n");
    }
}
