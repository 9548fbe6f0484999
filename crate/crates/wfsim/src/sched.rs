//! Pluggable scheduling and admission policies.
//!
//! `select` makes a maximal greedy assignment of ready tasks to nodes. All
//! orders are total (tasks by id, nodes by id) so simulation traces are
//! reproducible byte for byte.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::infra::{locality_score, ClusterSpec, FsState, NodeId};
use crate::wes::ALIGN_STAGE_TEMPLATES;
use crate::workflow::{DagIndex, MemoryModel, TaskId, TaskTemplate, ThreadModel, WorkflowDag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Batch-queue behavior: pick the feasible node with the lowest thread
    /// utilization; file placement is invisible.
    SgeLoadBalance,
    /// Placement-aware behavior: prefer the feasible node already holding
    /// the largest share of the task's input bytes.
    HiwayLocality,
    /// Single knob for the whole workflow: admit while fewer than `k` tasks
    /// run, ignoring per-template memory needs.
    LocalMaxConcurrency { k: u32 },
    /// Admit while the task's memory requirement fits on the node.
    LocalMemoryAware,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub kind: PolicyKind,
    /// Restrict alignment-stage tasks to the first N nodes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment_node_cap: Option<u32>,
    /// Operator-configured thread allotment per template, overriding the
    /// free-threads division.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub thread_defaults: BTreeMap<String, u32>,
    /// Templates the node cap applies to.
    #[serde(default = "default_capped_templates")]
    pub capped_templates: Vec<String>,
}

fn default_capped_templates() -> Vec<String> {
    ALIGN_STAGE_TEMPLATES.iter().map(|s| s.to_string()).collect()
}

impl Policy {
    pub fn new(kind: PolicyKind) -> Self {
        Policy {
            kind,
            alignment_node_cap: None,
            thread_defaults: BTreeMap::new(),
            capped_templates: default_capped_templates(),
        }
    }

    pub fn with_cap(mut self, cap: u32) -> Self {
        self.alignment_node_cap = Some(cap);
        self
    }

    pub fn with_thread_default(mut self, template: &str, threads: u32) -> Self {
        self.thread_defaults.insert(template.to_string(), threads);
        self
    }
}

/// Instantaneous resource usage of one node. `threads_in_use` counts
/// demanded (allotted) threads, which may exceed the hardware count when
/// oversubscription is being penalized rather than forbidden.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeLoad {
    pub node: NodeId,
    pub threads_in_use: u32,
    pub mem_gb_in_use: f64,
    pub running: Vec<TaskId>,
}

impl NodeLoad {
    pub fn empty(node: NodeId) -> Self {
        NodeLoad { node, threads_in_use: 0, mem_gb_in_use: 0.0, running: Vec::new() }
    }
}

/// True iff the node has both the threads and the memory for one more
/// instance of this task: remaining threads cover the smallest possible
/// allotment and remaining memory covers the task's requirement.
pub fn feasible(
    template: &TaskTemplate,
    input_gb: f64,
    threads_cap: u32,
    mem_cap_gb: f64,
    load: &NodeLoad,
) -> bool {
    let free_threads = threads_cap.saturating_sub(load.threads_in_use);
    let free_mem = mem_cap_gb - load.mem_gb_in_use;
    free_threads >= template.threads.min_threads() && free_mem >= template.memory.required_gb(input_gb)
}

/// One scheduling decision.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Position of the task in the DAG's task vector.
    pub task_pos: usize,
    pub node: NodeId,
    pub threads: u32,
}

/// Ready tasks, bucketed by template with a total order on task ids.
#[derive(Debug, Default, Clone)]
pub struct ReadyQueue {
    by_template: BTreeMap<String, BTreeSet<(TaskId, usize)>>,
    len: usize,
}

impl ReadyQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn insert(&mut self, template: &str, id: TaskId, pos: usize) {
        if self.by_template.entry(template.to_string()).or_default().insert((id, pos)) {
            self.len += 1;
        }
    }

    pub fn remove(&mut self, template: &str, id: TaskId, pos: usize) {
        if let Some(set) = self.by_template.get_mut(template) {
            if set.remove(&(id, pos)) {
                self.len -= 1;
            }
        }
    }

}

/// Everything `select` needs to look at besides the queue and the loads.
pub struct SchedContext<'a> {
    pub dag: &'a WorkflowDag,
    pub index: &'a DagIndex,
    pub cluster: &'a ClusterSpec,
    pub fs: &'a FsState,
    /// Strict mode: allotments are clamped to free capacity and no policy
    /// may oversubscribe.
    pub strict: bool,
}

/// Working copy of the load numbers; cheap to clone per round.
#[derive(Debug, Clone, Copy)]
struct ScratchLoad {
    threads_in_use: u32,
    mem_gb_in_use: f64,
}

fn feasible_scratch(
    template: &TaskTemplate,
    input_gb: f64,
    threads_cap: u32,
    mem_cap_gb: f64,
    load: &ScratchLoad,
) -> bool {
    let free_threads = threads_cap.saturating_sub(load.threads_in_use);
    let free_mem = mem_cap_gb - load.mem_gb_in_use;
    free_threads >= template.threads.min_threads()
        && free_mem >= template.memory.required_gb(input_gb)
}

/// Greedy maximal assignment of ready tasks to nodes under `policy`.
///
/// Tasks are visited in task-id order; each one gets the policy's preferred
/// feasible node or is skipped. Skipping is final for this round: resources
/// only shrink while the round runs, so a same-requirement task can never
/// fit later in the round.
pub fn select(
    ctx: &SchedContext<'_>,
    ready: &ReadyQueue,
    loads: &[NodeLoad],
    policy: &Policy,
) -> Vec<Assignment> {
    let mut scratch: Vec<ScratchLoad> = loads
        .iter()
        .map(|l| ScratchLoad { threads_in_use: l.threads_in_use, mem_gb_in_use: l.mem_gb_in_use })
        .collect();
    let mut assignments: Vec<Assignment> = Vec::new();
    let mut running_total: u32 =
        loads.iter().map(|l| l.running.len() as u32).sum();

    // Templates proven unplaceable this round (uniform requirements only).
    let mut skip: HashSet<&str> = HashSet::new();
    // Per-template count of tasks not yet assigned this round.
    let mut remaining: BTreeMap<&str, usize> =
        ready.by_template.iter().map(|(k, v)| (k.as_str(), v.len())).collect();
    // Cursor per template: all entries up to and including it were visited.
    let mut cursors: BTreeMap<&str, (TaskId, usize)> = BTreeMap::new();

    'outer: loop {
        if let PolicyKind::LocalMaxConcurrency { k } = policy.kind {
            if running_total >= k {
                break;
            }
        }

        // Next unvisited ready task in global id order, skipping dead
        // templates.
        let mut best: Option<(&str, (TaskId, usize))> = None;
        for (template, set) in &ready.by_template {
            let template = template.as_str();
            if skip.contains(template) {
                continue;
            }
            let next = match cursors.get(template) {
                Some(&cursor) => set
                    .range((std::ops::Bound::Excluded(cursor), std::ops::Bound::Unbounded))
                    .next(),
                None => set.iter().next(),
            };
            if let Some(&entry) = next {
                if best.map(|(_, e)| entry.0 < e.0).unwrap_or(true) {
                    best = Some((template, entry));
                }
            }
        }
        let Some((template_name, entry)) = best else {
            break 'outer;
        };
        cursors.insert(template_name, entry);

        let (_, task_pos) = entry;
        let task = &ctx.dag.tasks[task_pos];
        let template = &ctx.dag.templates[template_name];
        let input_gb = crate::workflow::total_input_gb(ctx.dag, ctx.index, task);
        let mem_req = template.memory.required_gb(input_gb);

        let node_limit = if policy.capped_templates.iter().any(|t| t == template_name) {
            policy
                .alignment_node_cap
                .map(|cap| (cap as usize).min(ctx.cluster.nodes.len()))
                .unwrap_or(ctx.cluster.nodes.len())
        } else {
            ctx.cluster.nodes.len()
        };

        let chosen = choose_node(ctx, policy, task, template, input_gb, &scratch, node_limit);
        match chosen {
            Some(node_pos) => {
                let threads = allot_threads(
                    ctx,
                    policy,
                    template_name,
                    template,
                    mem_req,
                    &ctx.cluster.nodes[node_pos],
                    &scratch[node_pos],
                    remaining[template_name],
                );
                let load = &mut scratch[node_pos];
                load.threads_in_use += threads;
                load.mem_gb_in_use += mem_req;
                running_total += 1;
                *remaining.get_mut(template_name).unwrap() -= 1;
                assignments.push(Assignment {
                    task_pos,
                    node: ctx.cluster.nodes[node_pos].id,
                    threads,
                });
            }
            None => {
                // A later task with identical requirements cannot fit either;
                // only uniform-requirement templates allow the shortcut.
                if matches!(template.memory, MemoryModel::Fixed { .. }) {
                    skip.insert(template_name);
                }
            }
        }
    }

    assignments
}

/// Node preferred by the policy for this task, as a position into the
/// cluster's node vector, or None if the task cannot be placed now.
fn choose_node(
    ctx: &SchedContext<'_>,
    policy: &Policy,
    task: &crate::workflow::TaskInstance,
    template: &TaskTemplate,
    input_gb: f64,
    scratch: &[ScratchLoad],
    node_limit: usize,
) -> Option<usize> {
    // Utilization comparison via integer cross-multiplication keeps ties
    // exact.
    let utilization_less = |a: usize, b: usize| -> bool {
        let (na, nb) = (&ctx.cluster.nodes[a], &ctx.cluster.nodes[b]);
        let lhs = scratch[a].threads_in_use as u64 * nb.threads as u64;
        let rhs = scratch[b].threads_in_use as u64 * na.threads as u64;
        lhs < rhs
    };

    match policy.kind {
        PolicyKind::SgeLoadBalance | PolicyKind::LocalMemoryAware => {
            let mut best: Option<usize> = None;
            for pos in 0..node_limit {
                let node = &ctx.cluster.nodes[pos];
                if !feasible_scratch(template, input_gb, node.threads, node.mem_gb, &scratch[pos]) {
                    continue;
                }
                if best.map(|b| utilization_less(pos, b)).unwrap_or(true) {
                    best = Some(pos);
                }
            }
            best
        }
        PolicyKind::HiwayLocality => {
            let mut best: Option<(usize, f64)> = None;
            for pos in 0..node_limit {
                let node = &ctx.cluster.nodes[pos];
                if !feasible_scratch(template, input_gb, node.threads, node.mem_gb, &scratch[pos]) {
                    continue;
                }
                let score = locality_score(ctx.dag, ctx.index, task, node.id, ctx.fs);
                let better = match best {
                    None => true,
                    Some((b, s)) => score > s || (score == s && utilization_less(pos, b)),
                };
                if better {
                    best = Some((pos, score));
                }
            }
            best.map(|(pos, _)| pos)
        }
        PolicyKind::LocalMaxConcurrency { .. } => {
            // Admission was already capped by the caller loop; memory is not
            // checked at all. In strict mode capacity still binds.
            let mut best: Option<usize> = None;
            for pos in 0..node_limit {
                let node = &ctx.cluster.nodes[pos];
                if ctx.strict
                    && !feasible_scratch(template, input_gb, node.threads, node.mem_gb, &scratch[pos])
                {
                    continue;
                }
                if best.map(|b| utilization_less(pos, b)).unwrap_or(true) {
                    best = Some(pos);
                }
            }
            best
        }
    }
}

/// Threads granted to the task on the chosen node.
///
/// Fixed-thread templates get their count. Configurable templates take the
/// operator default when one is configured; otherwise the node's free
/// threads are divided by how many more ready instances could still land on
/// it (bounded by memory slots). In strict mode the allotment never exceeds
/// the free threads.
#[allow(clippy::too_many_arguments)]
fn allot_threads(
    ctx: &SchedContext<'_>,
    policy: &Policy,
    template_name: &str,
    template: &TaskTemplate,
    mem_req: f64,
    node: &crate::infra::NodeSpec,
    load: &ScratchLoad,
    remaining_ready_same_template: usize,
) -> u32 {
    let max = template.threads.max_threads();
    let free_threads = node.threads.saturating_sub(load.threads_in_use);
    let allotted = match template.threads {
        ThreadModel::Fixed { n } => n,
        ThreadModel::Configurable { .. } => {
            if let Some(&d) = policy.thread_defaults.get(template_name) {
                d.min(max).max(1)
            } else {
                let mem_slots = if mem_req > 0.0 {
                    ((node.mem_gb - load.mem_gb_in_use) / mem_req).floor() as usize
                } else {
                    usize::MAX
                };
                let slots = remaining_ready_same_template.min(mem_slots).max(1);
                ((free_threads as usize / slots) as u32).clamp(1, max)
            }
        }
    };
    if ctx.strict {
        allotted.min(free_threads).max(template.threads.min_threads())
    } else {
        allotted
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infra::{preset, FsState};
    use crate::workflow::{
        FileArtifact, FileId, MemoryModel, OutputSizeModel, TaskInstance, WorkModel, WorkflowDag,
    };

    fn mutect_template() -> TaskTemplate {
        TaskTemplate {
            name: "mutect".into(),
            threads: ThreadModel::Fixed { n: 1 },
            memory: MemoryModel::Fixed { gb: 3.0 },
            work: WorkModel { serial_s: 60.0, parallel_s_per_gb: 0.0 },
            deterministic: true,
            output_size: OutputSizeModel { fixed_gb: 0.0, per_input_gb: 0.0 },
        }
    }

    fn dag_of_tasks(n: usize, template: TaskTemplate) -> WorkflowDag {
        let mut dag = WorkflowDag::default();
        let name = template.name.clone();
        dag.templates.insert(name.clone(), template);
        dag.files.push(FileArtifact { id: FileId(0), size_gb: 1.0, producer: None });
        for i in 0..n {
            dag.tasks.push(TaskInstance {
                id: TaskId(i as u64),
                template: name.clone(),
                inputs: vec![FileId(0)],
                params: vec![],
                outputs: vec![],
                compute_input_gb: None,
            });
        }
        dag
    }

    fn ready_all(dag: &WorkflowDag) -> ReadyQueue {
        let mut q = ReadyQueue::new();
        for (pos, t) in dag.tasks.iter().enumerate() {
            q.insert(&t.template, t.id, pos);
        }
        q
    }

    #[test]
    fn feasible_checks_threads_and_memory() {
        let tmpl = mutect_template();
        let mut load = NodeLoad::empty(NodeId(0));
        // Empty 24-thread, 24 GB node takes a 1-thread 3 GB task.
        assert!(feasible(&tmpl, 0.0, 24, 24.0, &load));
        // Ninth instance after eight consumed all memory does not fit.
        load.threads_in_use = 8;
        load.mem_gb_in_use = 24.0;
        assert!(!feasible(&tmpl, 0.0, 24, 24.0, &load));
        // No free threads, plenty of memory.
        let mut load = NodeLoad::empty(NodeId(0));
        load.threads_in_use = 24;
        assert!(!feasible(&tmpl, 0.0, 24, 24.0, &load));
    }

    #[test]
    fn single_task_lands_on_single_free_node() {
        let dag = dag_of_tasks(1, mutect_template());
        let index = DagIndex::build(&dag).unwrap();
        let cluster = preset("YC").unwrap();
        let fs = FsState::new();
        let ctx = SchedContext { dag: &dag, index: &index, cluster: &cluster, fs: &fs, strict: true };
        let loads: Vec<NodeLoad> = cluster.nodes.iter().map(|n| NodeLoad::empty(n.id)).collect();
        let picked = select(
            &ctx,
            &ready_all(&dag),
            &loads,
            &Policy::new(PolicyKind::SgeLoadBalance),
        );
        assert_eq!(picked.len(), 1);
        assert_eq!(picked[0].node, NodeId(0));
        assert_eq!(picked[0].threads, 1);
    }

    #[test]
    fn locality_beats_empty_node() {
        let dag = dag_of_tasks(1, mutect_template());
        let index = DagIndex::build(&dag).unwrap();
        let mut cluster = preset("YC").unwrap();
        cluster.nodes.truncate(2);
        let mut fs = FsState::new();
        fs.add_replica(FileId(0), NodeId(1));
        let ctx = SchedContext { dag: &dag, index: &index, cluster: &cluster, fs: &fs, strict: true };
        let loads: Vec<NodeLoad> = cluster.nodes.iter().map(|n| NodeLoad::empty(n.id)).collect();
        let picked =
            select(&ctx, &ready_all(&dag), &loads, &Policy::new(PolicyKind::HiwayLocality));
        assert_eq!(picked[0].node, NodeId(1));
    }

    #[test]
    fn max_concurrency_admits_exactly_k() {
        // 80 ready single-thread tasks on the stand-alone node, k = 30.
        let dag = dag_of_tasks(80, mutect_template());
        let index = DagIndex::build(&dag).unwrap();
        let cluster = preset("SA").unwrap();
        let fs = FsState::new();
        let ctx =
            SchedContext { dag: &dag, index: &index, cluster: &cluster, fs: &fs, strict: false };
        let loads: Vec<NodeLoad> = cluster.nodes.iter().map(|n| NodeLoad::empty(n.id)).collect();
        let picked = select(
            &ctx,
            &ready_all(&dag),
            &loads,
            &Policy::new(PolicyKind::LocalMaxConcurrency { k: 30 }),
        );
        assert_eq!(picked.len(), 30);
        // Smallest task ids win.
        assert!(picked.iter().all(|a| a.task_pos < 30));
    }

    #[test]
    fn memory_aware_on_sa_is_thread_bound() {
        // Memory would allow floor(512/3) = 170 concurrent tasks; the 80
        // hardware threads bind first.
        let dag = dag_of_tasks(200, mutect_template());
        let index = DagIndex::build(&dag).unwrap();
        let cluster = preset("SA").unwrap();
        let fs = FsState::new();
        let ctx = SchedContext { dag: &dag, index: &index, cluster: &cluster, fs: &fs, strict: true };
        let loads: Vec<NodeLoad> = cluster.nodes.iter().map(|n| NodeLoad::empty(n.id)).collect();
        let picked =
            select(&ctx, &ready_all(&dag), &loads, &Policy::new(PolicyKind::LocalMemoryAware));
        assert_eq!(picked.len(), 80);
    }

    #[test]
    fn select_is_deterministic() {
        let dag = dag_of_tasks(40, mutect_template());
        let index = DagIndex::build(&dag).unwrap();
        let cluster = preset("YC").unwrap();
        let fs = FsState::new();
        let ctx = SchedContext { dag: &dag, index: &index, cluster: &cluster, fs: &fs, strict: true };
        let loads: Vec<NodeLoad> = cluster.nodes.iter().map(|n| NodeLoad::empty(n.id)).collect();
        let policy = Policy::new(PolicyKind::SgeLoadBalance);
        let a = select(&ctx, &ready_all(&dag), &loads, &policy);
        let b = select(&ctx, &ready_all(&dag), &loads, &policy);
        assert_eq!(a, b);
    }

    #[test]
    fn strict_mode_never_violates_feasibility() {
        let dag = dag_of_tasks(300, mutect_template());
        let index = DagIndex::build(&dag).unwrap();
        let cluster = preset("YC").unwrap();
        let fs = FsState::new();
        let ctx = SchedContext { dag: &dag, index: &index, cluster: &cluster, fs: &fs, strict: true };
        let loads: Vec<NodeLoad> = cluster.nodes.iter().map(|n| NodeLoad::empty(n.id)).collect();
        for kind in [
            PolicyKind::SgeLoadBalance,
            PolicyKind::HiwayLocality,
            PolicyKind::LocalMaxConcurrency { k: 10_000 },
            PolicyKind::LocalMemoryAware,
        ] {
            let picked = select(&ctx, &ready_all(&dag), &loads, &Policy::new(kind));
            let mut by_node: BTreeMap<NodeId, (u32, f64)> = BTreeMap::new();
            for a in &picked {
                let e = by_node.entry(a.node).or_insert((0, 0.0));
                e.0 += a.threads;
                e.1 += 3.0;
            }
            for (node, (threads, mem)) in by_node {
                let spec = cluster.nodes.iter().find(|n| n.id == node).unwrap();
                assert!(threads <= spec.threads, "thread capacity violated on {node}");
                assert!(mem <= spec.mem_gb + 1e-9, "memory capacity violated on {node}");
            }
        }
    }

    #[test]
    fn alignment_cap_restricts_nodes() {
        let mut tmpl = mutect_template();
        tmpl.name = "align_pipeline".into();
        let dag = dag_of_tasks(10, tmpl);
        let index = DagIndex::build(&dag).unwrap();
        let cluster = preset("YC").unwrap();
        let fs = FsState::new();
        let ctx = SchedContext { dag: &dag, index: &index, cluster: &cluster, fs: &fs, strict: true };
        let loads: Vec<NodeLoad> = cluster.nodes.iter().map(|n| NodeLoad::empty(n.id)).collect();
        let policy = Policy::new(PolicyKind::SgeLoadBalance).with_cap(3);
        let picked = select(&ctx, &ready_all(&dag), &loads, &policy);
        assert_eq!(picked.len(), 10);
        assert!(picked.iter().all(|a| a.node.0 < 3));
    }

    #[test]
    fn configurable_threads_divide_free_capacity_by_memory_slots() {
        // 24 threads, 24 GB node; 8 GB per instance leaves 3 memory slots,
        // so each alignment instance gets 24 / 3 = 8 threads.
        let tmpl = TaskTemplate {
            name: "align_pipeline".into(),
            threads: ThreadModel::Configurable { max: 24 },
            memory: MemoryModel::Fixed { gb: 8.0 },
            work: WorkModel { serial_s: 0.0, parallel_s_per_gb: 3600.0 },
            deterministic: true,
            output_size: OutputSizeModel { fixed_gb: 1.0, per_input_gb: 0.0 },
        };
        let dag = dag_of_tasks(100, tmpl);
        let index = DagIndex::build(&dag).unwrap();
        let mut cluster = preset("YC").unwrap();
        cluster.nodes.truncate(1);
        let fs = FsState::new();
        let ctx = SchedContext { dag: &dag, index: &index, cluster: &cluster, fs: &fs, strict: true };
        let loads: Vec<NodeLoad> = cluster.nodes.iter().map(|n| NodeLoad::empty(n.id)).collect();
        let picked = select(
            &ctx,
            &ready_all(&dag),
            &loads,
            &Policy::new(PolicyKind::SgeLoadBalance),
        );
        assert_eq!(picked.len(), 3);
        assert!(picked.iter().all(|a| a.threads == 8), "allotments {picked:?}");

        // An operator default overrides the division.
        let policy =
            Policy::new(PolicyKind::SgeLoadBalance).with_thread_default("align_pipeline", 3);
        let picked = select(&ctx, &ready_all(&dag), &loads, &policy);
        assert!(picked.iter().all(|a| a.threads == 3));
    }
}
