//! Task-profile constants and the fitting harness that produces them.
//!
//! The bundled profile is committed data (`profiles/default.json`): users
//! reproduce acceptance runs without re-fitting. `fit` searches the profile
//! constants so that simulated makespans approximate a set of observed
//! runtimes, minimizing the maximum relative error.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::{simulate, SimOptions};
use crate::infra::ClusterSpec;
use crate::sched::Policy;
use crate::wes::{generate_wes, WesParams};
use crate::workflow::{
    MemoryModel, OutputSizeModel, TaskTemplate, ThreadModel, WorkModel, WorkflowDag,
};

/// Sizes of the workflow input files, in gigabytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileSizes {
    /// One read set (FASTQ) per sample.
    pub fastq_gb: f64,
    /// Indexed reference genome read by the alignment stage.
    pub reference_gb: f64,
    /// Reference dictionary loaded by every variant-calling task.
    pub dictionary_gb: f64,
}

/// A named bundle of task templates plus input file sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSet {
    pub templates: BTreeMap<String, TaskTemplate>,
    pub file_sizes: FileSizes,
}

#[derive(Debug, thiserror::Error)]
pub enum ProfileError {
    #[error("profile constraint violated: {0}")]
    Constraint(String),
    #[error("profile JSON: {0}")]
    Json(#[from] serde_json::Error),
}

impl ProfileSet {
    /// The committed default profile, produced by `fit` against the observed
    /// runtime table and checked in as data.
    pub fn bundled() -> ProfileSet {
        serde_json::from_str(include_str!("../profiles/default.json"))
            .expect("bundled profile parses")
    }

    pub fn template(&self, name: &str) -> Option<&TaskTemplate> {
        self.templates.get(name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, ProfileError> {
        let set: ProfileSet = serde_json::from_str(text)?;
        set.check_ranges()?;
        Ok(set)
    }

    /// Tool-characteristics ranges the constants must stay inside: variant
    /// calling needs 3-10 GB resident, alignment 8-14 GB, and the reference
    /// dictionary is 2.6 GB.
    pub fn check_ranges(&self) -> Result<(), ProfileError> {
        if let Some(t) = self.template("mutect") {
            let gb = t.memory.required_gb(0.0);
            if !(3.0..=10.0).contains(&gb) {
                return Err(ProfileError::Constraint(format!(
                    "mutect memory {gb} GB outside [3, 10]"
                )));
            }
        }
        for name in ["align_pipeline", "bwa_mem"] {
            if let Some(t) = self.template(name) {
                let gb = t.memory.required_gb(0.0);
                if !(8.0..=14.0).contains(&gb) {
                    return Err(ProfileError::Constraint(format!(
                        "{name} memory {gb} GB outside [8, 14]"
                    )));
                }
            }
        }
        if self.file_sizes.dictionary_gb != 2.6 {
            return Err(ProfileError::Constraint(format!(
                "dictionary size {} GB, expected 2.6",
                self.file_sizes.dictionary_gb
            )));
        }
        Ok(())
    }
}

fn template(
    name: &str,
    threads: ThreadModel,
    mem_gb: f64,
    serial_s: f64,
    parallel_s_per_gb: f64,
    out_fixed_gb: f64,
    out_per_input: f64,
) -> TaskTemplate {
    TaskTemplate {
        name: name.to_string(),
        threads,
        memory: MemoryModel::Fixed { gb: mem_gb },
        work: WorkModel { serial_s, parallel_s_per_gb },
        deterministic: true,
        output_size: OutputSizeModel { fixed_gb: out_fixed_gb, per_input_gb: out_per_input },
    }
}

/// Uncalibrated starting profile: structure and resource classes are right,
/// duration constants are seeds for `fit`.
pub fn seed_profile() -> ProfileSet {
    let mut templates = BTreeMap::new();
    let fixed1 = ThreadModel::Fixed { n: 1 };
    let conf24 = ThreadModel::Configurable { max: 24 };
    // Pipe-fused TRIMADAP | BWA | SAMBLASTER | SAMTOOLS stage: scheduled as
    // one unit with the aligner's memory footprint.
    templates.insert(
        "align_pipeline".into(),
        template("align_pipeline", conf24, 8.0, 60.0, 12_800.0, 3.0, 0.0),
    );
    // Unfused variants of the same stage.
    templates.insert("trimadap".into(), template("trimadap", conf24, 1.0, 30.0, 100.0, 0.0, 1.0));
    templates
        .insert("bwa_mem".into(), template("bwa_mem", conf24, 8.0, 60.0, 12_500.0, 3.0, 0.0));
    templates
        .insert("samblaster".into(), template("samblaster", fixed1, 1.0, 30.0, 50.0, 0.0, 1.0));
    templates.insert("samtools".into(), template("samtools", conf24, 1.0, 30.0, 50.0, 0.0, 1.0));
    templates.insert("split".into(), template("split", fixed1, 1.0, 120.0, 2_800.0, 0.0, 1.0));
    templates.insert("mutect".into(), template("mutect", fixed1, 3.0, 25.0, 450.0, 0.02, 0.0));
    templates.insert("bcftools".into(), template("bcftools", fixed1, 0.5, 6.0, 20.0, 0.0, 0.9));
    templates.insert("merge_vcf".into(), template("merge_vcf", fixed1, 0.5, 60.0, 10.0, 0.0, 1.0));
    templates.insert("bgzip".into(), template("bgzip", fixed1, 0.2, 30.0, 20.0, 0.0, 0.25));
    ProfileSet {
        templates,
        file_sizes: FileSizes { fastq_gb: 6.0, reference_gb: 3.0, dictionary_gb: 2.6 },
    }
}

/// Workload of one fit target.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Workload {
    Wes(WesParams),
    /// Pre-built DAG; sizes are taken as-is, only template constants vary.
    Dag(WorkflowDag),
}

/// One observed runtime the profile should reproduce.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitTarget {
    pub name: String,
    pub cluster: ClusterSpec,
    pub policy: Policy,
    pub options: SimOptions,
    pub workload: Workload,
    pub observed_makespan_h: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TargetError {
    pub name: String,
    pub observed_h: f64,
    pub simulated_h: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitOutcome {
    pub profiles: ProfileSet,
    pub errors: Vec<TargetError>,
    pub max_rel_error: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum FitError {
    #[error("no fit targets given")]
    NoTargets,
    #[error("target {name}: {source}")]
    Simulation { name: String, source: crate::engine::SimError },
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

/// Simulated makespan of one target under a candidate profile.
fn evaluate_target(profile: &ProfileSet, target: &FitTarget) -> Result<f64, FitError> {
    let dag = match &target.workload {
        // Artifact sizes depend on the profile, so the DAG is regenerated.
        Workload::Wes(params) => generate_wes(params, profile).map_err(|e| FitError::Simulation {
            name: target.name.clone(),
            source: crate::engine::SimError::InvalidDag(e.to_string()),
        })?,
        Workload::Dag(dag) => dag.clone(),
    };
    let (_, report) = simulate(&dag, &target.cluster, &target.policy, profile, &target.options)
        .map_err(|source| FitError::Simulation { name: target.name.clone(), source })?;
    Ok(report.makespan_h)
}

fn objective(profile: &ProfileSet, targets: &[FitTarget]) -> Result<(f64, Vec<TargetError>), FitError> {
    let mut errors = Vec::with_capacity(targets.len());
    let mut worst = 0.0f64;
    for target in targets {
        let simulated_h = evaluate_target(profile, target)?;
        let rel_error = (simulated_h - target.observed_makespan_h).abs() / target.observed_makespan_h;
        worst = worst.max(rel_error);
        errors.push(TargetError {
            name: target.name.clone(),
            observed_h: target.observed_makespan_h,
            simulated_h,
            rel_error,
        });
    }
    Ok((worst, errors))
}

/// One tunable scalar inside a ProfileSet.
struct Dimension {
    name: &'static str,
    lo: f64,
    hi: f64,
    get: fn(&ProfileSet) -> f64,
    set: fn(&mut ProfileSet, f64),
}

macro_rules! work_dim {
    ($name:literal, $tmpl:literal, $field:ident, $lo:expr, $hi:expr) => {
        Dimension {
            name: $name,
            lo: $lo,
            hi: $hi,
            get: |p| p.templates[$tmpl].work.$field,
            set: |p, v| p.templates.get_mut($tmpl).unwrap().work.$field = v,
        }
    };
}

fn dimensions() -> Vec<Dimension> {
    vec![
        Dimension {
            name: "fastq_gb",
            lo: 1.0,
            hi: 40.0,
            get: |p| p.file_sizes.fastq_gb,
            set: |p, v| p.file_sizes.fastq_gb = v,
        },
        Dimension {
            name: "reference_gb",
            lo: 0.5,
            hi: 16.0,
            get: |p| p.file_sizes.reference_gb,
            set: |p, v| p.file_sizes.reference_gb = v,
        },
        Dimension {
            name: "align_gb",
            lo: 0.25,
            hi: 40.0,
            get: |p| p.templates["align_pipeline"].output_size.fixed_gb,
            set: |p, v| p.templates.get_mut("align_pipeline").unwrap().output_size.fixed_gb = v,
        },
        work_dim!("align_serial_s", "align_pipeline", serial_s, 0.0, 7200.0),
        work_dim!("align_s_per_gb", "align_pipeline", parallel_s_per_gb, 100.0, 100_000.0),
        Dimension {
            name: "mutect_mem_gb",
            lo: 3.0,
            hi: 10.0,
            get: |p| p.templates["mutect"].memory.required_gb(0.0),
            set: |p, v| p.templates.get_mut("mutect").unwrap().memory = MemoryModel::Fixed { gb: v },
        },
        work_dim!("mutect_serial_s", "mutect", serial_s, 1.0, 600.0),
        work_dim!("mutect_s_per_gb", "mutect", parallel_s_per_gb, 0.0, 100_000.0),
        work_dim!("split_serial_s", "split", serial_s, 0.0, 7200.0),
        work_dim!("split_s_per_gb", "split", parallel_s_per_gb, 0.0, 20_000.0),
        work_dim!("filter_serial_s", "bcftools", serial_s, 0.0, 120.0),
        work_dim!("merge_serial_s", "merge_vcf", serial_s, 0.0, 1800.0),
        work_dim!("compress_serial_s", "bgzip", serial_s, 0.0, 1800.0),
    ]
}

/// Options steering the coordinate search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSearch {
    /// Full sweeps over all dimensions.
    pub passes: u32,
    /// Log-spaced probe points per dimension and pass.
    pub grid_points: u32,
    /// Interval-halving refinements around the best probe.
    pub refine_steps: u32,
}

impl Default for FitSearch {
    fn default() -> Self {
        FitSearch { passes: 3, grid_points: 9, refine_steps: 18 }
    }
}

/// Coordinate search over the profile constants, minimizing the maximum
/// relative makespan error across targets. Deterministic: fixed grids,
/// sequential passes, ties keep the smaller candidate value.
pub fn fit(
    targets: &[FitTarget],
    start: &ProfileSet,
    search: &FitSearch,
) -> Result<FitOutcome, FitError> {
    if targets.is_empty() {
        return Err(FitError::NoTargets);
    }
    let mut profile = start.clone();
    let (mut best_err, mut best_table) = objective(&profile, targets)?;
    let dims = dimensions();

    for _pass in 0..search.passes {
        for dim in &dims {
            if !profile.templates.contains_key(dim_template(dim.name)) && needs_template(dim.name) {
                continue;
            }
            let current = (dim.get)(&profile);
            let mut best_v = current;

            // Log grid across the whole range, plus the current value.
            let mut candidates: Vec<f64> = Vec::with_capacity(search.grid_points as usize + 1);
            let lo = dim.lo.max(1e-6);
            for i in 0..search.grid_points {
                let t = i as f64 / (search.grid_points - 1).max(1) as f64;
                let v = lo * (dim.hi / lo).powf(t);
                candidates.push(clamp(v, dim.lo, dim.hi));
            }
            candidates.push(current);
            for &v in &candidates {
                if v == best_v {
                    continue;
                }
                let mut trial = profile.clone();
                (dim.set)(&mut trial, v);
                let (err, table) = objective(&trial, targets)?;
                if err < best_err || (err == best_err && v < best_v) {
                    best_err = err;
                    best_table = table;
                    best_v = v;
                }
            }

            // Halving refinement around the winner.
            let mut step = (dim.hi - dim.lo) / (search.grid_points.max(2) as f64);
            for _ in 0..search.refine_steps {
                for v in [clamp(best_v - step, dim.lo, dim.hi), clamp(best_v + step, dim.lo, dim.hi)]
                {
                    if v == best_v {
                        continue;
                    }
                    let mut trial = profile.clone();
                    (dim.set)(&mut trial, v);
                    let (err, table) = objective(&trial, targets)?;
                    if err < best_err || (err == best_err && v < best_v) {
                        best_err = err;
                        best_table = table;
                        best_v = v;
                    }
                }
                step /= 2.0;
            }

            (dim.set)(&mut profile, best_v);
        }
    }

    profile.check_ranges()?;
    Ok(FitOutcome { profiles: profile, errors: best_table, max_rel_error: best_err })
}

fn clamp(v: f64, lo: f64, hi: f64) -> f64 {
    v.max(lo).min(hi)
}

fn dim_template(name: &str) -> &'static str {
    match name {
        n if n.starts_with("align") => "align_pipeline",
        n if n.starts_with("mutect") => "mutect",
        n if n.starts_with("split") => "split",
        n if n.starts_with("filter") => "bcftools",
        n if n.starts_with("merge") => "merge_vcf",
        n if n.starts_with("compress") => "bgzip",
        _ => "",
    }
}

fn needs_template(name: &str) -> bool {
    !dim_template(name).is_empty()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infra::preset;
    use crate::sched::PolicyKind;
    use crate::workflow::{FileArtifact, FileId, TaskId, TaskInstance};

    fn single_task_target(name: &str, observed_h: f64) -> FitTarget {
        let mut dag = WorkflowDag::default();
        dag.templates.insert("mutect".into(), seed_profile().templates["mutect"].clone());
        dag.files.push(FileArtifact { id: FileId(0), size_gb: 1.0, producer: None });
        dag.tasks.push(TaskInstance {
            id: TaskId(0),
            template: "mutect".into(),
            inputs: vec![FileId(0)],
            params: vec![],
            outputs: vec![],
            compute_input_gb: None,
        });
        FitTarget {
            name: name.into(),
            cluster: preset("SA").unwrap(),
            policy: Policy::new(PolicyKind::LocalMemoryAware),
            options: SimOptions::default(),
            workload: Workload::Dag(dag),
            observed_makespan_h: observed_h,
        }
    }

    #[test]
    fn fit_single_free_constant_reaches_exact_match() {
        // One task whose duration is serial_s + 450 * 1 GB; aim at 0.5 h.
        let target = single_task_target("one", 0.5);
        let outcome = fit(&[target], &seed_profile(), &FitSearch::default()).unwrap();
        assert!(
            outcome.max_rel_error < 1e-4,
            "expected near-exact fit, got {}",
            outcome.max_rel_error
        );
    }

    #[test]
    fn fit_conflicting_targets_reports_compromise() {
        // Same single-task workload, two incompatible observations: the
        // minimax compromise sits between them and the error is reported.
        let t1 = single_task_target("low", 0.2);
        let t2 = single_task_target("high", 0.6);
        let outcome = fit(&[t1, t2], &seed_profile(), &FitSearch::default()).unwrap();
        assert!(outcome.max_rel_error > 0.2, "over-constrained fit cannot be exact");
        assert!(outcome.max_rel_error < 1.1);
        let errs: Vec<f64> = outcome.errors.iter().map(|e| e.rel_error).collect();
        // Minimax balances both sides.
        assert!((errs[0] - errs[1]).abs() < 0.05, "errors {errs:?} should be balanced");
    }

    #[test]
    fn fit_is_deterministic() {
        let t1 = single_task_target("low", 0.2);
        let t2 = single_task_target("high", 0.6);
        let a = fit(&[t1.clone(), t2.clone()], &seed_profile(), &FitSearch::default()).unwrap();
        let b = fit(&[t1, t2], &seed_profile(), &FitSearch::default()).unwrap();
        assert_eq!(a.profiles, b.profiles);
        assert_eq!(a.max_rel_error, b.max_rel_error);
    }

    #[test]
    fn bundled_profile_respects_ranges() {
        let p = ProfileSet::bundled();
        p.check_ranges().unwrap();
        assert_eq!(p.file_sizes.dictionary_gb, 2.6);
    }

    #[test]
    fn profile_json_round_trip() {
        let p = seed_profile();
        let back = ProfileSet::from_json(&p.to_json()).unwrap();
        assert_eq!(p, back);
    }
}
