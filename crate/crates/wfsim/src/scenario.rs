//! Ready-made couplings of cluster, policy and workflow mode.
//!
//! Each built-in infrastructure ran the workflow with a particular scheduler
//! configuration; these defaults bundle them so a cluster name is enough to
//! reproduce the corresponding run.

use serde::{Deserialize, Serialize};

use crate::calibrate::{FitTarget, ProfileSet, Workload};
use crate::engine::SimOptions;
use crate::infra::{preset, ClusterSpec, InfraError};
use crate::sched::{Policy, PolicyKind};
use crate::wes::{DistributionMode, WesParams};

/// Cluster plus the scheduling setup its runs used.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub cluster: ClusterSpec,
    pub policy: Policy,
    pub distribution_mode: DistributionMode,
}

/// Default policy and data-distribution mode for a cluster preset.
///
/// * `SA` ran under the single max-concurrency knob (30, sized for the
///   aligner's memory) with 3 threads per alignment; physically split.
/// * `YC` ran the placement-aware scheduler; physically split.
/// * `HPC` ran the load balancer on 54 of 111 nodes with two 24-thread
///   alignment instances per node, and shipped whole alignments (broadcast).
/// * `EC2` mirrors the YC setup on rented nodes.
pub fn scenario(name: &str) -> Result<Scenario, InfraError> {
    let cluster = preset(name)?;
    let (policy, mode) = match name {
        "SA" => (
            Policy::new(PolicyKind::LocalMaxConcurrency { k: 30 })
                .with_thread_default("align_pipeline", 3)
                .with_thread_default("bwa_mem", 3),
            DistributionMode::PhysicalSplit,
        ),
        "YC" => (Policy::new(PolicyKind::HiwayLocality), DistributionMode::PhysicalSplit),
        "HPC" => (
            Policy::new(PolicyKind::SgeLoadBalance)
                .with_cap(54)
                .with_thread_default("align_pipeline", 24)
                .with_thread_default("bwa_mem", 24),
            DistributionMode::Broadcast,
        ),
        "EC2" => (
            Policy::new(PolicyKind::HiwayLocality).with_thread_default("align_pipeline", 8),
            DistributionMode::PhysicalSplit,
        ),
        other => return Err(InfraError::UnknownPreset(other.to_string())),
    };
    Ok(Scenario { cluster, policy, distribution_mode: mode })
}

fn options(cache: bool) -> SimOptions {
    SimOptions { cache_enabled: cache, ..SimOptions::default() }
}

fn table_target(name: &str, system: &str, cache: bool, regions: u32, observed_h: f64) -> FitTarget {
    let sc = scenario(system).expect("built-in scenario");
    let params = WesParams::new(27, 2, regions, sc.distribution_mode);
    FitTarget {
        name: name.to_string(),
        cluster: sc.cluster,
        policy: sc.policy,
        options: options(cache),
        workload: Workload::Wes(params),
        observed_makespan_h: observed_h,
    }
}

/// The observed-runtime table the bundled profile is fitted against:
/// cached/uncached runs of the 467-region workflow on the three owned
/// systems plus the region sweep on the mid-size cluster.
pub fn reference_fit_targets() -> Vec<FitTarget> {
    vec![
        table_target("sa_nocache", "SA", false, 467, 65.13),
        table_target("sa_cache", "SA", true, 467, 24.0),
        table_target("yc_nocache", "YC", false, 467, 11.13),
        table_target("yc_cache", "YC", true, 467, 7.6),
        table_target("hpc", "HPC", false, 467, 1.14),
        table_target("yc_r22", "YC", true, 22, 6.35),
        table_target("yc_r2863", "YC", true, 2863, 15.2),
    ]
}

/// Profile source named on the command line: bundled constants or a file.
pub fn load_profiles(spec: &str) -> Result<ProfileSet, String> {
    if spec == "bundled" || spec == "default" {
        return Ok(ProfileSet::bundled());
    }
    let text = std::fs::read_to_string(spec).map_err(|e| format!("read {spec}: {e}"))?;
    ProfileSet::from_json(&text).map_err(|e| e.to_string())
}

/// Cluster named on the command line: preset name or a JSON file path.
pub fn load_cluster(spec: &str) -> Result<ClusterSpec, String> {
    if crate::infra::PRESET_NAMES.contains(&spec) {
        return Ok(preset(spec).expect("preset exists"));
    }
    let text = std::fs::read_to_string(spec).map_err(|e| format!("read {spec}: {e}"))?;
    ClusterSpec::from_json(&text).map_err(|e| e.to_string())
}

/// Policy named on the command line: `sge_load_balance`, `hiway_locality`,
/// `local_memory_aware`, `local_max_concurrency:<k>`, or a JSON file path.
pub fn load_policy(spec: &str) -> Result<Policy, String> {
    match spec {
        "sge_load_balance" => return Ok(Policy::new(PolicyKind::SgeLoadBalance)),
        "hiway_locality" => return Ok(Policy::new(PolicyKind::HiwayLocality)),
        "local_memory_aware" => return Ok(Policy::new(PolicyKind::LocalMemoryAware)),
        _ => {}
    }
    if let Some(k) = spec.strip_prefix("local_max_concurrency:") {
        let k: u32 = k.parse().map_err(|_| format!("bad concurrency in {spec:?}"))?;
        return Ok(Policy::new(PolicyKind::LocalMaxConcurrency { k }));
    }
    let text = std::fs::read_to_string(spec).map_err(|e| format!("read {spec}: {e}"))?;
    serde_json::from_str(&text).map_err(|e| format!("parse policy {spec}: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenarios_exist_for_all_presets() {
        for name in crate::infra::PRESET_NAMES {
            let sc = scenario(name).unwrap();
            assert_eq!(sc.cluster.name, name);
        }
        assert!(scenario("nope").is_err());
    }

    #[test]
    fn hpc_scenario_is_broadcast_with_node_cap() {
        let sc = scenario("HPC").unwrap();
        assert_eq!(sc.distribution_mode, DistributionMode::Broadcast);
        assert_eq!(sc.policy.alignment_node_cap, Some(54));
    }

    #[test]
    fn policy_strings_parse() {
        assert!(matches!(
            load_policy("local_max_concurrency:30").unwrap().kind,
            PolicyKind::LocalMaxConcurrency { k: 30 }
        ));
        assert!(load_policy("local_max_concurrency:x").is_err());
        assert!(matches!(load_policy("hiway_locality").unwrap().kind, PolicyKind::HiwayLocality));
    }

    #[test]
    fn reference_targets_cover_the_table() {
        let targets = reference_fit_targets();
        assert_eq!(targets.len(), 7);
        assert!(targets.iter().any(|t| t.name == "hpc" && t.observed_makespan_h == 1.14));
    }
}
