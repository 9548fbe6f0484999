//! Command-line front end: generate workflows, simulate them on cluster
//! presets, sweep region counts, and turn reports into cost tables.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use wfsim::calibrate::{fit, FitSearch, FitTarget, ProfileSet, Workload};
use wfsim::cost::{cost_report_for_run, cost_table_csv, CostReport};
use wfsim::engine::{export_trace_csv, simulate, RunReport, SimOptions};
use wfsim::scenario::{load_cluster, load_policy, load_profiles, reference_fit_targets, scenario};
use wfsim::wes::{count_by_template, generate_wes, DistributionMode, WesParams};
use wfsim::workflow::WorkflowDag;

#[derive(Parser)]
#[command(name = "wfsim", version, about = "Whole-exome workflow scheduling simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Emit a workflow DAG as JSON.
    Generate(GenerateArgs),
    /// Simulate a DAG on a cluster and write report.json and trace.csv.
    Simulate(SimulateArgs),
    /// Simulate once per region count and write a summary CSV.
    Sweep(SweepArgs),
    /// Turn run reports into a cost/effectiveness table.
    Cost(CostArgs),
    /// Fit profile constants against observed makespans.
    Fit(FitArgs),
    /// Print the built-in cluster presets, scenario defaults and profile.
    Presets,
}

#[derive(Args)]
struct WorkflowArgs {
    /// Number of tumor samples.
    #[arg(long, default_value_t = 27)]
    tumor: u32,
    /// Number of control samples.
    #[arg(long, default_value_t = 2)]
    control: u32,
    /// Number of genome regions (variant-calling split count).
    #[arg(long, default_value_t = 467)]
    regions: u32,
    /// How alignments reach variant calling: physically split region files
    /// or full-alignment broadcast.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<DistributionMode>,
    /// Run the alignment tools as separate chained tasks instead of one
    /// pipe-fused stage.
    #[arg(long, default_value_t = false)]
    unfused: bool,
    /// Override the per-sample read-set size in GB.
    #[arg(long)]
    fastq_gb: Option<f64>,
}

fn parse_mode(s: &str) -> Result<DistributionMode, String> {
    match s {
        "split" | "physical_split" => Ok(DistributionMode::PhysicalSplit),
        "broadcast" => Ok(DistributionMode::Broadcast),
        other => Err(format!("unknown mode {other:?} (use split or broadcast)")),
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    workflow: WorkflowArgs,
    /// Profile set: "bundled" or a JSON file path.
    #[arg(long, default_value = "bundled")]
    profiles: String,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulate a previously generated DAG instead of generating one.
    #[arg(long)]
    dag: Option<PathBuf>,
    #[command(flatten)]
    workflow: WorkflowArgs,
    /// Cluster: SA, YC, HPC, EC2 or a JSON file path.
    #[arg(long, default_value = "SA")]
    cluster: String,
    /// Scheduling policy: sge_load_balance, hiway_locality,
    /// local_memory_aware, local_max_concurrency:<k>, or a JSON file path.
    /// Defaults to the cluster's scenario policy.
    #[arg(long)]
    policy: Option<String>,
    /// Invocation cache: on or off.
    #[arg(long, default_value = "on", value_parser = parse_on_off, action = clap::ArgAction::Set)]
    cache: bool,
    #[arg(long, default_value = "bundled")]
    profiles: String,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    workflow: WorkflowArgs,
    /// Region counts to sweep, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    sweep_regions: Vec<u32>,
    #[arg(long, default_value = "YC")]
    cluster: String,
    #[arg(long)]
    policy: Option<String>,
    #[arg(long, default_value = "on", value_parser = parse_on_off, action = clap::ArgAction::Set)]
    cache: bool,
    #[arg(long, default_value = "bundled")]
    profiles: String,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct CostArgs {
    /// report.json files produced by `simulate`.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// Compute the low-utilization variant for this many runs per year.
    #[arg(long)]
    runs_per_year: Option<u64>,
    /// Also write cost.csv into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// Targets JSON file, or "reference" for the built-in runtime table.
    #[arg(long, default_value = "reference")]
    targets: String,
    /// Starting profile: "bundled", "seed", or a JSON file path.
    #[arg(long, default_value = "seed")]
    start: String,
    #[arg(long, default_value_t = 3)]
    passes: u32,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn parse_on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        other => Err(format!("expected on or off, got {other:?}")),
    }
}

enum AppError {
    /// Bad arguments or configuration: exit code 2.
    Usage(String),
    /// Failure while running: exit code 1.
    Runtime(String),
}

impl AppError {
    fn usage(e: impl std::fmt::Display) -> Self {
        AppError::Usage(e.to_string())
    }
    fn runtime(e: impl std::fmt::Display) -> Self {
        AppError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(AppError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Cost(args) => cmd_cost(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Presets => cmd_presets(),
    }
}

fn build_params(
    w: &WorkflowArgs,
    default_mode: DistributionMode,
) -> Result<WesParams, AppError> {
    if w.tumor < 1 || w.control < 1 || w.regions < 1 {
        return Err(AppError::Usage(
            "tumor, control and regions must all be at least 1".into(),
        ));
    }
    if let Some(gb) = w.fastq_gb {
        if gb <= 0.0 {
            return Err(AppError::Usage("fastq-gb must be positive".into()));
        }
    }
    Ok(WesParams {
        n_tumor: w.tumor,
        n_control: w.control,
        n_regions: w.regions,
        distribution_mode: w.mode.unwrap_or(default_mode),
        fused_alignment: !w.unfused,
        input_fastq_gb: w.fastq_gb,
    })
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, AppError> {
    std::fs::create_dir_all(dir).map_err(AppError::runtime)?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(AppError::runtime)?;
    Ok(path)
}

fn cmd_generate(args: GenerateArgs) -> Result<(), AppError> {
    let profiles = load_profiles(&args.profiles).map_err(AppError::usage)?;
    let params = build_params(&args.workflow, DistributionMode::PhysicalSplit)?;
    let dag = generate_wes(&params, &profiles).map_err(AppError::usage)?;
    let path = write_file(&args.out, "dag.json", &dag.to_json())?;
    let counts = count_by_template(&dag);
    eprintln!(
        "wrote {} ({} tasks, {} files)",
        path.display(),
        dag.tasks.len(),
        dag.files.len()
    );
    for (template, count) in counts {
        eprintln!("  {template}: {count}");
    }
    Ok(())
}

struct RunSetup {
    dag: WorkflowDag,
    cluster: wfsim::infra::ClusterSpec,
    policy: wfsim::sched::Policy,
    options: SimOptions,
    profiles: ProfileSet,
}

fn build_setup(
    dag_path: Option<&PathBuf>,
    workflow: &WorkflowArgs,
    cluster_spec: &str,
    policy_spec: Option<&String>,
    cache: bool,
    profiles_spec: &str,
) -> Result<RunSetup, AppError> {
    let profiles = load_profiles(profiles_spec).map_err(AppError::usage)?;
    let cluster = load_cluster(cluster_spec).map_err(AppError::usage)?;
    let default = scenario(&cluster.name).ok();
    let policy = match policy_spec {
        Some(spec) => load_policy(spec).map_err(AppError::usage)?,
        None => default
            .as_ref()
            .map(|s| s.policy.clone())
            .unwrap_or_else(|| wfsim::sched::Policy::new(wfsim::sched::PolicyKind::SgeLoadBalance)),
    };
    let dag = match dag_path {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(AppError::usage)?;
            WorkflowDag::from_json(&text).map_err(AppError::usage)?
        }
        None => {
            let mode = default
                .as_ref()
                .map(|s| s.distribution_mode)
                .unwrap_or(DistributionMode::PhysicalSplit);
            let params = build_params(workflow, mode)?;
            generate_wes(&params, &profiles).map_err(AppError::usage)?
        }
    };
    let options = SimOptions { cache_enabled: cache, ..SimOptions::default() };
    Ok(RunSetup { dag, cluster, policy, options, profiles })
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), AppError> {
    let setup = build_setup(
        args.dag.as_ref(),
        &args.workflow,
        &args.cluster,
        args.policy.as_ref(),
        args.cache,
        &args.profiles,
    )?;
    let (trace, report) =
        simulate(&setup.dag, &setup.cluster, &setup.policy, &setup.profiles, &setup.options)
            .map_err(AppError::runtime)?;
    write_file(
        &args.out,
        "report.json",
        &serde_json::to_string_pretty(&report).map_err(AppError::runtime)?,
    )?;
    write_file(&args.out, "trace.csv", &export_trace_csv(&trace))?;
    println!("{}", report.makespan_h);
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), AppError> {
    if args.sweep_regions.is_empty() {
        return Err(AppError::Usage("sweep needs at least one region count".into()));
    }
    let mut rows: Vec<(u32, f64, usize, f64)> = Vec::new();
    for &regions in &args.sweep_regions {
        let mut workflow = WorkflowArgs {
            tumor: args.workflow.tumor,
            control: args.workflow.control,
            regions,
            mode: args.workflow.mode,
            unfused: args.workflow.unfused,
            fastq_gb: args.workflow.fastq_gb,
        };
        workflow.regions = regions;
        let setup = build_setup(
            None,
            &workflow,
            &args.cluster,
            args.policy.as_ref(),
            args.cache,
            &args.profiles,
        )?;
        let (_, report) =
            simulate(&setup.dag, &setup.cluster, &setup.policy, &setup.profiles, &setup.options)
                .map_err(AppError::runtime)?;
        rows.push((regions, report.makespan_h, setup.dag.tasks.len(), report.total_network_gb));
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut csv = String::from("regions,makespan_h,tasks,network_gb\n");
    for (r, makespan, tasks, net) in &rows {
        csv.push_str(&format!("{r},{makespan},{tasks},{net}\n"));
    }
    let path = write_file(&args.out, "sweep.csv", &csv)?;
    print!("{csv}");
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn cmd_cost(args: CostArgs) -> Result<(), AppError> {
    let mut reports: Vec<CostReport> = Vec::new();
    for path in &args.reports {
        let text = std::fs::read_to_string(path).map_err(AppError::usage)?;
        let run: RunReport = serde_json::from_str(&text).map_err(AppError::usage)?;
        let cost = cost_report_for_run(&run, args.runs_per_year).map_err(AppError::runtime)?;
        reports.push(cost);
    }
    let csv = cost_table_csv(&reports);
    print!("{csv}");
    if let Some(dir) = &args.out {
        write_file(dir, "cost.csv", &csv)?;
    }
    Ok(())
}

/// Friendlier on-disk shape for fit targets: names resolve through the
/// scenario defaults.
#[derive(Serialize, Deserialize)]
struct TargetsFile {
    targets: Vec<TargetSpec>,
    #[serde(default)]
    search: Option<FitSearch>,
}

#[derive(Serialize, Deserialize)]
struct TargetSpec {
    name: String,
    cluster: String,
    #[serde(default)]
    policy: Option<String>,
    #[serde(default = "default_cache")]
    cache: bool,
    tumor: u32,
    control: u32,
    regions: u32,
    #[serde(default)]
    mode: Option<String>,
    observed_makespan_h: f64,
}

fn default_cache() -> bool {
    true
}

fn resolve_targets(spec: &str) -> Result<(Vec<FitTarget>, FitSearch), AppError> {
    if spec == "reference" {
        return Ok((reference_fit_targets(), FitSearch::default()));
    }
    let text = std::fs::read_to_string(spec).map_err(AppError::usage)?;
    let file: TargetsFile = serde_json::from_str(&text).map_err(AppError::usage)?;
    let mut targets = Vec::new();
    for t in &file.targets {
        let sc = scenario(&t.cluster)
            .map_err(|_| AppError::Usage(format!("unknown cluster {:?}", t.cluster)))?;
        let policy = match &t.policy {
            Some(p) => load_policy(p).map_err(AppError::usage)?,
            None => sc.policy.clone(),
        };
        let mode = match t.mode.as_deref() {
            Some(m) => parse_mode(m).map_err(AppError::Usage)?,
            None => sc.distribution_mode,
        };
        targets.push(FitTarget {
            name: t.name.clone(),
            cluster: sc.cluster,
            policy,
            options: SimOptions { cache_enabled: t.cache, ..SimOptions::default() },
            workload: Workload::Wes(WesParams::new(t.tumor, t.control, t.regions, mode)),
            observed_makespan_h: t.observed_makespan_h,
        });
    }
    Ok((targets, file.search.unwrap_or_default()))
}

fn cmd_fit(args: FitArgs) -> Result<(), AppError> {
    let (targets, mut search) = resolve_targets(&args.targets)?;
    search.passes = args.passes;
    let start = match args.start.as_str() {
        "seed" => wfsim::calibrate::seed_profile(),
        other => load_profiles(other).map_err(AppError::usage)?,
    };
    let outcome = fit(&targets, &start, &search).map_err(AppError::runtime)?;
    let path = write_file(&args.out, "fitted_profiles.json", &outcome.profiles.to_json())?;
    eprintln!("wrote {}", path.display());
    println!("target,observed_h,simulated_h,rel_error");
    for e in &outcome.errors {
        println!("{},{},{:.4},{:.4}", e.name, e.observed_h, e.simulated_h, e.rel_error);
    }
    println!("max_rel_error,{:.4}", outcome.max_rel_error);
    Ok(())
}

fn cmd_presets() -> Result<(), AppError> {
    let mut clusters = BTreeMap::new();
    let mut scenarios = BTreeMap::new();
    for name in wfsim::infra::PRESET_NAMES {
        clusters.insert(name, wfsim::infra::preset(name).expect("preset"));
        scenarios.insert(name, scenario(name).expect("scenario"));
    }
    let doc = serde_json::json!({
        "clusters": clusters,
        "scenarios": scenarios,
        "profiles": ProfileSet::bundled(),
    });
    println!("{}", serde_json::to_string_pretty(&doc).expect("json"));
    Ok(())
}
