//! Cluster, network and file-system model, including the four built-in
//! infrastructure presets and the staging/locality computations.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::workflow::{DagIndex, FileId, TaskInstance, WorkflowDag};

/// Identifier of a compute node within a cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: NodeId,
    pub threads: u32,
    pub mem_gb: f64,
    pub class_label: String,
}

/// How tasks reach their files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FsRegime {
    /// Single machine, all I/O local.
    LocalOnly,
    /// Shared parallel POSIX file system; every read and write crosses the
    /// node link, file location is invisible to scheduling.
    SharedPosix,
    /// Non-POSIX distributed store; inputs are staged to the execution node
    /// and outputs staged back, replica placement matters.
    StagedDfs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub name: String,
    pub nodes: Vec<NodeSpec>,
    /// Link bandwidth per node in Gbit/s; 0 for a single node without a network.
    pub network_gbit: f64,
    pub fs_regime: FsRegime,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acquisition_cost_eur: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_run_rental_eur: Option<f64>,
}

impl ClusterSpec {
    pub fn total_threads(&self) -> u32 {
        self.nodes.iter().map(|n| n.threads).sum()
    }

    pub fn total_mem_gb(&self) -> f64 {
        self.nodes.iter().map(|n| n.mem_gb).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("cluster serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum InfraError {
    #[error("unknown cluster preset {0:?} (known: SA, YC, HPC, EC2)")]
    UnknownPreset(String),
    #[error("transfer of {size_gb} GB requested over a zero-bandwidth route")]
    ZeroBandwidth { size_gb: f64 },
    #[error("file {0} has no replica anywhere")]
    NoReplica(FileId),
}

fn nodes(rows: &[(usize, u32, f64, &str)]) -> Vec<NodeSpec> {
    let mut out = Vec::new();
    for &(count, threads, mem_gb, label) in rows {
        for _ in 0..count {
            out.push(NodeSpec {
                id: NodeId(out.len() as u32),
                threads,
                mem_gb,
                class_label: label.to_string(),
            });
        }
    }
    out
}

/// Built-in cluster descriptions.
///
/// * `SA`: one 80-thread, 512 GB stand-alone server, local file system.
/// * `YC`: 23-node commodity cluster, 24 threads/node, 24 or 36 GB/node,
///   10 Gbit Ethernet, staged DFS.
/// * `HPC`: 111 nodes totaling 3784 threads, four memory classes, 64 Gbit,
///   shared POSIX file system.
/// * `EC2`: 16 rented nodes, 122 GB each, staged DFS, billed per run.
pub fn preset(name: &str) -> Result<ClusterSpec, InfraError> {
    match name {
        "SA" => Ok(ClusterSpec {
            name: "SA".into(),
            nodes: nodes(&[(1, 80, 512.0, "sa-server")]),
            network_gbit: 0.0,
            fs_regime: FsRegime::LocalOnly,
            acquisition_cost_eur: Some(11_000.0),
            per_run_rental_eur: None,
        }),
        "YC" => Ok(ClusterSpec {
            name: "YC".into(),
            // 12 + 11 nodes; 23 * 24 = 552 threads.
            nodes: nodes(&[(12, 24, 24.0, "yc-24g"), (11, 24, 36.0, "yc-36g")]),
            network_gbit: 10.0,
            fs_regime: FsRegime::StagedDfs,
            acquisition_cost_eur: Some(100_000.0),
            per_run_rental_eur: None,
        }),
        "HPC" => Ok(ClusterSpec {
            name: "HPC".into(),
            // Memory classes in proportion 60/30/15/6; ten of the large-memory
            // nodes carry one extra thread so the totals are 111 nodes and
            // 3784 threads.
            nodes: nodes(&[
                (60, 34, 128.0, "hpc-128g"),
                (30, 34, 188.0, "hpc-188g"),
                (11, 34, 500.0, "hpc-500g"),
                (4, 35, 500.0, "hpc-500g"),
                (6, 35, 1000.0, "hpc-1t"),
            ]),
            network_gbit: 64.0,
            fs_regime: FsRegime::SharedPosix,
            acquisition_cost_eur: Some(800_000.0),
            per_run_rental_eur: None,
        }),
        "EC2" => Ok(ClusterSpec {
            name: "EC2".into(),
            nodes: nodes(&[(16, 16, 122.0, "r3.4xlarge")]),
            network_gbit: 10.0,
            fs_regime: FsRegime::StagedDfs,
            acquisition_cost_eur: None,
            per_run_rental_eur: Some(500.0),
        }),
        other => Err(InfraError::UnknownPreset(other.to_string())),
    }
}

pub const PRESET_NAMES: [&str; 4] = ["SA", "YC", "HPC", "EC2"];

/// Seconds to move `size_gb` over a link of `bandwidth_gbit`, fair-shared
/// among `concurrent_share` transfers.
pub fn transfer_time_s(
    size_gb: f64,
    bandwidth_gbit: f64,
    concurrent_share: u32,
) -> Result<f64, InfraError> {
    if size_gb == 0.0 {
        return Ok(0.0);
    }
    if bandwidth_gbit <= 0.0 {
        return Err(InfraError::ZeroBandwidth { size_gb });
    }
    debug_assert!(concurrent_share >= 1);
    Ok(size_gb * 8.0 / (bandwidth_gbit / concurrent_share as f64))
}

/// Current replica placement: which nodes hold each artifact. Owned and
/// mutated by exactly one simulation run.
#[derive(Debug, Clone, Default)]
pub struct FsState {
    placement: HashMap<FileId, BTreeSet<NodeId>>,
}

impl FsState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_replica(&mut self, file: FileId, node: NodeId) {
        self.placement.entry(file).or_default().insert(node);
    }

    pub fn replicas(&self, file: FileId) -> Option<&BTreeSet<NodeId>> {
        self.placement.get(&file)
    }

    pub fn is_resident(&self, file: FileId, node: NodeId) -> bool {
        self.placement.get(&file).is_some_and(|set| set.contains(&node))
    }
}

/// One pending movement of an artifact to or from a node.
#[derive(Debug, Clone, PartialEq)]
pub struct Transfer {
    pub file: FileId,
    pub size_gb: f64,
}

/// Input fetches and output publishes required to run `task` on `node`.
///
/// * `StagedDfs`: fetch every input byte not already resident on the node,
///   publish every output.
/// * `SharedPosix`: fetch all input bytes and publish all outputs at link
///   speed; placement is irrelevant.
/// * `LocalOnly`: nothing moves.
pub fn stage_plan(
    dag: &WorkflowDag,
    index: &DagIndex,
    task: &TaskInstance,
    node: NodeId,
    fs: &FsState,
    regime: FsRegime,
) -> Result<(Vec<Transfer>, Vec<Transfer>), InfraError> {
    let mut fetch = Vec::new();
    let mut publish = Vec::new();
    match regime {
        FsRegime::LocalOnly => {}
        FsRegime::SharedPosix => {
            for input in &task.inputs {
                let size_gb = dag.files[index.file_pos[input]].size_gb;
                fetch.push(Transfer { file: *input, size_gb });
            }
            for output in &task.outputs {
                let size_gb = dag.files[index.file_pos[output]].size_gb;
                publish.push(Transfer { file: *output, size_gb });
            }
        }
        FsRegime::StagedDfs => {
            for input in &task.inputs {
                match fs.replicas(*input) {
                    None => return Err(InfraError::NoReplica(*input)),
                    Some(set) if set.contains(&node) => {}
                    Some(_) => {
                        let size_gb = dag.files[index.file_pos[input]].size_gb;
                        fetch.push(Transfer { file: *input, size_gb });
                    }
                }
            }
            for output in &task.outputs {
                let size_gb = dag.files[index.file_pos[output]].size_gb;
                publish.push(Transfer { file: *output, size_gb });
            }
        }
    }
    Ok((fetch, publish))
}

/// Fraction of a task's input bytes already resident on `node`, in [0, 1].
/// A task with no input bytes scores 1 everywhere.
pub fn locality_score(
    dag: &WorkflowDag,
    index: &DagIndex,
    task: &TaskInstance,
    node: NodeId,
    fs: &FsState,
) -> f64 {
    let mut total = 0.0;
    let mut resident = 0.0;
    for input in &task.inputs {
        let size_gb = dag.files[index.file_pos[input]].size_gb;
        total += size_gb;
        if fs.is_resident(*input, node) {
            resident += size_gb;
        }
    }
    if total == 0.0 {
        1.0
    } else {
        resident / total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workflow::{
        FileArtifact, MemoryModel, OutputSizeModel, TaskId, TaskTemplate, ThreadModel, WorkModel,
    };

    #[test]
    fn preset_totals_match_hardware_table() {
        let sa = preset("SA").unwrap();
        assert_eq!(sa.nodes.len(), 1);
        assert_eq!(sa.nodes[0].threads, 80);
        assert_eq!(sa.nodes[0].mem_gb, 512.0);
        assert_eq!(sa.fs_regime, FsRegime::LocalOnly);

        let yc = preset("YC").unwrap();
        assert_eq!(yc.nodes.len(), 23);
        assert_eq!(yc.total_threads(), 552);
        assert!(yc.nodes.iter().all(|n| n.mem_gb == 24.0 || n.mem_gb == 36.0));
        assert_eq!(yc.network_gbit, 10.0);

        let hpc = preset("HPC").unwrap();
        assert_eq!(hpc.nodes.len(), 111);
        assert_eq!(hpc.total_threads(), 3784);
        assert_eq!(hpc.fs_regime, FsRegime::SharedPosix);
        for m in [128.0, 188.0, 500.0, 1000.0] {
            assert!(hpc.nodes.iter().any(|n| n.mem_gb == m));
        }

        let ec2 = preset("EC2").unwrap();
        assert_eq!(ec2.nodes.len(), 16);
        assert_eq!(ec2.total_threads(), 256);
        assert!(ec2.nodes.iter().all(|n| n.mem_gb == 122.0));
        assert_eq!(ec2.per_run_rental_eur, Some(500.0));

        assert!(preset("XYZ").is_err());
    }

    #[test]
    fn transfer_time_fair_share() {
        assert_eq!(transfer_time_s(10.0, 10.0, 1).unwrap(), 8.0);
        assert_eq!(transfer_time_s(0.0, 10.0, 1).unwrap(), 0.0);
        assert_eq!(transfer_time_s(0.0, 0.0, 7).unwrap(), 0.0);
        assert_eq!(transfer_time_s(10.0, 10.0, 2).unwrap(), 16.0);
        assert!(transfer_time_s(1.0, 0.0, 1).is_err());
    }

    fn tiny_dag() -> (WorkflowDag, DagIndex) {
        let mut dag = WorkflowDag::default();
        dag.templates.insert(
            "t".into(),
            TaskTemplate {
                name: "t".into(),
                threads: ThreadModel::Fixed { n: 1 },
                memory: MemoryModel::Fixed { gb: 1.0 },
                work: WorkModel { serial_s: 1.0, parallel_s_per_gb: 0.0 },
                deterministic: true,
                output_size: OutputSizeModel { fixed_gb: 1.0, per_input_gb: 0.0 },
            },
        );
        dag.files.push(FileArtifact { id: FileId(0), size_gb: 10.0, producer: None });
        dag.files.push(FileArtifact { id: FileId(1), size_gb: 2.0, producer: None });
        dag.files.push(FileArtifact { id: FileId(2), size_gb: 1.0, producer: Some(TaskId(0)) });
        dag.tasks.push(crate::workflow::TaskInstance {
            id: TaskId(0),
            template: "t".into(),
            inputs: vec![FileId(0), FileId(1)],
            params: vec![],
            outputs: vec![FileId(2)],
            compute_input_gb: None,
        });
        let index = DagIndex::build(&dag).unwrap();
        (dag, index)
    }

    #[test]
    fn stage_plan_local_only_is_empty() {
        let (dag, index) = tiny_dag();
        let fs = FsState::new();
        let (fetch, publish) =
            stage_plan(&dag, &index, &dag.tasks[0], NodeId(0), &fs, FsRegime::LocalOnly).unwrap();
        assert!(fetch.is_empty());
        assert!(publish.is_empty());
    }

    #[test]
    fn stage_plan_staged_dfs_respects_placement() {
        let (dag, index) = tiny_dag();
        let mut fs = FsState::new();
        fs.add_replica(FileId(0), NodeId(0));
        fs.add_replica(FileId(1), NodeId(1));

        // Input 0 resident on node 0, input 1 only elsewhere.
        let (fetch, publish) =
            stage_plan(&dag, &index, &dag.tasks[0], NodeId(0), &fs, FsRegime::StagedDfs).unwrap();
        assert_eq!(fetch, vec![Transfer { file: FileId(1), size_gb: 2.0 }]);
        assert_eq!(publish.len(), 1);

        // Everything resident: nothing fetched, outputs still published.
        fs.add_replica(FileId(1), NodeId(0));
        let (fetch, publish) =
            stage_plan(&dag, &index, &dag.tasks[0], NodeId(0), &fs, FsRegime::StagedDfs).unwrap();
        assert!(fetch.is_empty());
        assert_eq!(publish, vec![Transfer { file: FileId(2), size_gb: 1.0 }]);
    }

    #[test]
    fn stage_plan_fetch_plus_resident_covers_all_input_bytes() {
        let (dag, index) = tiny_dag();
        let mut fs = FsState::new();
        fs.add_replica(FileId(0), NodeId(0));
        fs.add_replica(FileId(1), NodeId(1));
        let task = &dag.tasks[0];
        let (fetch, _) =
            stage_plan(&dag, &index, task, NodeId(0), &fs, FsRegime::StagedDfs).unwrap();
        let fetched: f64 = fetch.iter().map(|t| t.size_gb).sum();
        let resident: f64 = task
            .inputs
            .iter()
            .filter(|f| fs.is_resident(**f, NodeId(0)))
            .map(|f| dag.files[index.file_pos[f]].size_gb)
            .sum();
        let total: f64 = crate::workflow::total_input_gb(&dag, &index, task);
        assert_eq!(fetched + resident, total);
    }

    #[test]
    fn stage_plan_missing_replica_is_an_error() {
        let (dag, index) = tiny_dag();
        let fs = FsState::new();
        let err = stage_plan(&dag, &index, &dag.tasks[0], NodeId(0), &fs, FsRegime::StagedDfs);
        assert!(err.is_err());
    }

    #[test]
    fn locality_score_is_byte_weighted() {
        let (dag, index) = tiny_dag();
        let mut fs = FsState::new();
        let task = &dag.tasks[0];
        assert_eq!(locality_score(&dag, &index, task, NodeId(0), &fs), 0.0);
        fs.add_replica(FileId(0), NodeId(0));
        fs.add_replica(FileId(1), NodeId(0));
        assert_eq!(locality_score(&dag, &index, task, NodeId(0), &fs), 1.0);
        // 3 GB of 12 GB resident -> 0.25.
        let mut fs = FsState::new();
        fs.add_replica(FileId(1), NodeId(0)); // 2 GB
        let mut dag2 = dag.clone();
        dag2.files[1].size_gb = 3.0;
        dag2.files[0].size_gb = 9.0;
        let index2 = DagIndex::build(&dag2).unwrap();
        assert_eq!(locality_score(&dag2, &index2, &dag2.tasks[0], NodeId(0), &fs), 0.25);
    }

    #[test]
    fn locality_one_implies_empty_fetch() {
        let (dag, index) = tiny_dag();
        let mut fs = FsState::new();
        fs.add_replica(FileId(0), NodeId(0));
        fs.add_replica(FileId(1), NodeId(0));
        assert_eq!(locality_score(&dag, &index, &dag.tasks[0], NodeId(0), &fs), 1.0);
        let (fetch, _) =
            stage_plan(&dag, &index, &dag.tasks[0], NodeId(0), &fs, FsRegime::StagedDfs).unwrap();
        assert!(fetch.is_empty());
    }

    #[test]
    fn cluster_json_round_trip() {
        let yc = preset("YC").unwrap();
        let back = ClusterSpec::from_json(&yc.to_json()).unwrap();
        assert_eq!(yc, back);
    }
}
