//! Generator for the mouse whole-exome variant-calling workflow.
//!
//! The emitted DAG follows the original study shape: every tumor exome is
//! paired with every control exome, both read sets of a pair are aligned
//! (redundantly, once per pair), each alignment is split into genome
//! regions, one variant-calling task runs per pair and region, and per-pair
//! results are filtered, merged and compressed.

use serde::{Deserialize, Serialize};

use crate::calibrate::ProfileSet;
use crate::workflow::{
    signature, FileArtifact, FileId, TaskId, TaskInstance, WorkflowDag,
};

/// How alignments reach the variant-calling tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionMode {
    /// Every variant-calling task receives the full alignments and is told
    /// which region to process; most transferred bytes go unused.
    Broadcast,
    /// Alignments are physically split into per-region files and only the
    /// matching region is shipped.
    PhysicalSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WesParams {
    pub n_tumor: u32,
    pub n_control: u32,
    pub n_regions: u32,
    #[serde(default = "default_mode")]
    pub distribution_mode: DistributionMode,
    /// Pipe-fused TRIMADAP|BWA|SAMBLASTER|SAMTOOLS stage scheduled as one
    /// unit; when false the four tools run as separate chained tasks.
    #[serde(default = "default_true")]
    pub fused_alignment: bool,
    /// Size of one read set; defaults to the profile's value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_fastq_gb: Option<f64>,
}

fn default_mode() -> DistributionMode {
    DistributionMode::PhysicalSplit
}

fn default_true() -> bool {
    true
}

impl WesParams {
    pub fn new(n_tumor: u32, n_control: u32, n_regions: u32, mode: DistributionMode) -> Self {
        WesParams {
            n_tumor,
            n_control,
            n_regions,
            distribution_mode: mode,
            fused_alignment: true,
            input_fastq_gb: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum WesError {
    #[error("sample and region counts must be at least 1")]
    ZeroCount,
    #[error("input_fastq_gb must be positive")]
    NonPositiveFastq,
    #[error("profile is missing template {0:?}")]
    MissingTemplate(&'static str),
}

/// Template names of the alignment stage; scheduling node caps apply to
/// these.
pub const ALIGN_STAGE_TEMPLATES: [&str; 5] =
    ["align_pipeline", "trimadap", "bwa_mem", "samblaster", "samtools"];

/// Templates that consume raw read sets; their instances carry the
/// per-sample redundancy that invocation caching removes.
pub const ALIGN_ENTRY_TEMPLATES: [&str; 2] = ["align_pipeline", "trimadap"];

struct Builder {
    dag: WorkflowDag,
    next_file: u64,
    next_task: u64,
}

impl Builder {
    fn file(&mut self, size_gb: f64, producer: Option<TaskId>) -> FileId {
        let id = FileId(self.next_file);
        self.next_file += 1;
        self.dag.files.push(FileArtifact { id, size_gb, producer });
        id
    }

    fn task(
        &mut self,
        template: &str,
        inputs: Vec<FileId>,
        params: Vec<(String, String)>,
        compute_input_gb: Option<f64>,
    ) -> TaskId {
        let id = TaskId(self.next_task);
        self.next_task += 1;
        self.dag.tasks.push(TaskInstance {
            id,
            template: template.to_string(),
            inputs,
            params,
            outputs: Vec::new(),
            compute_input_gb,
        });
        id
    }

    fn output_of(&mut self, task: TaskId, size_gb: f64) -> FileId {
        let file = self.file(size_gb, Some(task));
        let pos = task.0 as usize;
        self.dag.tasks[pos].outputs.push(file);
        file
    }
}

/// Emits the workflow DAG for the given shape, with artifact sizes filled
/// from the profile's output-size models.
pub fn generate_wes(params: &WesParams, profiles: &ProfileSet) -> Result<WorkflowDag, WesError> {
    if params.n_tumor < 1 || params.n_control < 1 || params.n_regions < 1 {
        return Err(WesError::ZeroCount);
    }
    if let Some(gb) = params.input_fastq_gb {
        if gb <= 0.0 {
            return Err(WesError::NonPositiveFastq);
        }
    }
    let required: &[&str] = if params.fused_alignment {
        &["align_pipeline", "split", "mutect", "bcftools", "merge_vcf", "bgzip"]
    } else {
        &["trimadap", "bwa_mem", "samblaster", "samtools", "split", "mutect", "bcftools",
          "merge_vcf", "bgzip"]
    };
    for name in required {
        if profiles.template(name).is_none() {
            return Err(WesError::MissingTemplate(match *name {
                "align_pipeline" => "align_pipeline",
                "trimadap" => "trimadap",
                "bwa_mem" => "bwa_mem",
                "samblaster" => "samblaster",
                "samtools" => "samtools",
                "split" => "split",
                "mutect" => "mutect",
                "bcftools" => "bcftools",
                "merge_vcf" => "merge_vcf",
                _ => "bgzip",
            }));
        }
    }

    let fastq_gb = params.input_fastq_gb.unwrap_or(profiles.file_sizes.fastq_gb);
    let reference_gb = profiles.file_sizes.reference_gb;
    let dictionary_gb = profiles.file_sizes.dictionary_gb;
    let n_tumor = params.n_tumor as usize;
    let n_control = params.n_control as usize;
    let regions = params.n_regions as usize;
    let pairs = n_tumor * n_control;
    let split_mode = params.distribution_mode == DistributionMode::PhysicalSplit;

    let mut b = Builder { dag: WorkflowDag::default(), next_file: 0, next_task: 0 };
    for name in required {
        let t = profiles.template(name).unwrap().clone();
        b.dag.templates.insert((*name).to_string(), t);
    }

    // Workflow inputs: one read set per sample plus the two reference files.
    let sample_labels: Vec<String> = (0..n_tumor)
        .map(|i| format!("t{i:02}"))
        .chain((0..n_control).map(|j| format!("c{j:02}")))
        .collect();
    let fastqs: Vec<FileId> = sample_labels.iter().map(|_| b.file(fastq_gb, None)).collect();
    let reference = b.file(reference_gb, None);
    let dictionary = b.file(dictionary_gb, None);

    let sample_of_pair =
        |p: usize| -> (usize, usize) { (p / n_control, n_tumor + (p % n_control)) };
    let pair_label = |p: usize| -> String {
        let (t, c) = sample_of_pair(p);
        format!("{}x{}", sample_labels[t], sample_labels[c])
    };

    // Alignment stage: two instances per pair, one per sample in the pair,
    // duplicated across pairs exactly as in the original implementation.
    let mut alignment_out: Vec<[FileId; 2]> = Vec::with_capacity(pairs);
    for p in 0..pairs {
        let (t, c) = sample_of_pair(p);
        let mut outs = [FileId(0); 2];
        for (slot, sample) in [t, c].into_iter().enumerate() {
            let sample_param = vec![("sample".to_string(), sample_labels[sample].clone())];
            let aligned = if params.fused_alignment {
                let tmpl = &profiles.templates["align_pipeline"];
                let input_gb = fastq_gb + reference_gb;
                let task = b.task(
                    "align_pipeline",
                    vec![fastqs[sample], reference],
                    sample_param,
                    Some(fastq_gb),
                );
                b.output_of(task, tmpl.output_size.output_gb(input_gb))
            } else {
                let trim = b.task("trimadap", vec![fastqs[sample]], sample_param.clone(), None);
                let trimmed = b.output_of(
                    trim,
                    profiles.templates["trimadap"].output_size.output_gb(fastq_gb),
                );
                let trimmed_gb = b.dag.files[trimmed.0 as usize].size_gb;
                let bwa = b.task(
                    "bwa_mem",
                    vec![trimmed, reference],
                    sample_param.clone(),
                    Some(trimmed_gb),
                );
                let raw = b.output_of(
                    bwa,
                    profiles.templates["bwa_mem"].output_size.output_gb(trimmed_gb + reference_gb),
                );
                let raw_gb = b.dag.files[raw.0 as usize].size_gb;
                let blast = b.task("samblaster", vec![raw], sample_param.clone(), None);
                let dedup = b.output_of(
                    blast,
                    profiles.templates["samblaster"].output_size.output_gb(raw_gb),
                );
                let dedup_gb = b.dag.files[dedup.0 as usize].size_gb;
                let sam = b.task("samtools", vec![dedup], sample_param, None);
                b.output_of(sam, profiles.templates["samtools"].output_size.output_gb(dedup_gb))
            };
            outs[slot] = aligned;
        }
        alignment_out.push(outs);
    }

    // Split stage (physical_split only): one split per alignment instance,
    // emitting one artifact per genome region.
    let mut region_files: Vec<Vec<[FileId; 2]>> = Vec::new();
    if split_mode {
        region_files = vec![vec![[FileId(0); 2]; regions]; pairs];
        for p in 0..pairs {
            let (t, c) = sample_of_pair(p);
            for (slot, sample) in [t, c].into_iter().enumerate() {
                let aligned = alignment_out[p][slot];
                let aligned_gb = b.dag.files[aligned.0 as usize].size_gb;
                let task = b.task(
                    "split",
                    vec![aligned],
                    vec![
                        ("sample".to_string(), sample_labels[sample].clone()),
                        ("pair".to_string(), pair_label(p)),
                    ],
                    None,
                );
                let region_gb = aligned_gb / regions as f64;
                for r in 0..regions {
                    region_files[p][r][slot] = b.output_of(task, region_gb);
                }
            }
        }
    }

    // Variant calling: one task per pair and region, consuming the matching
    // tumor/control data plus the reference dictionary.
    let mutect_tmpl = b.dag.templates["mutect"].clone();
    let mut mutect_out: Vec<Vec<FileId>> = vec![Vec::with_capacity(regions); pairs];
    for p in 0..pairs {
        for r in 0..regions {
            let (inputs, data_gb) = if split_mode {
                let [tr, cr] = region_files[p][r];
                let gb = b.dag.files[tr.0 as usize].size_gb + b.dag.files[cr.0 as usize].size_gb;
                (vec![tr, cr, dictionary], gb)
            } else {
                let [ta, ca] = alignment_out[p];
                let gb = (b.dag.files[ta.0 as usize].size_gb
                    + b.dag.files[ca.0 as usize].size_gb)
                    / regions as f64;
                (vec![ta, ca, dictionary], gb)
            };
            let task = b.task(
                "mutect",
                inputs,
                vec![
                    ("pair".to_string(), pair_label(p)),
                    ("region".to_string(), r.to_string()),
                ],
                Some(data_gb),
            );
            let out_gb = mutect_tmpl.output_size.output_gb(data_gb + dictionary_gb);
            mutect_out[p].push(b.output_of(task, out_gb));
        }
    }

    // Post-processing per pair: region-level filters, then merge, then
    // compress.
    let filter_tmpl = b.dag.templates["bcftools"].clone();
    let merge_tmpl = b.dag.templates["merge_vcf"].clone();
    let compress_tmpl = b.dag.templates["bgzip"].clone();
    for p in 0..pairs {
        let mut filtered = Vec::with_capacity(regions);
        for r in 0..regions {
            let input = mutect_out[p][r];
            let input_gb = b.dag.files[input.0 as usize].size_gb;
            let task = b.task(
                "bcftools",
                vec![input],
                vec![
                    ("pair".to_string(), pair_label(p)),
                    ("region".to_string(), r.to_string()),
                ],
                None,
            );
            filtered.push(b.output_of(task, filter_tmpl.output_size.output_gb(input_gb)));
        }
        let merged_in_gb: f64 =
            filtered.iter().map(|f| b.dag.files[f.0 as usize].size_gb).sum();
        let merge = b.task(
            "merge_vcf",
            filtered,
            vec![("pair".to_string(), pair_label(p))],
            None,
        );
        let merged = b.output_of(merge, merge_tmpl.output_size.output_gb(merged_in_gb));
        let merged_gb = b.dag.files[merged.0 as usize].size_gb;
        let compress = b.task(
            "bgzip",
            vec![merged],
            vec![("pair".to_string(), pair_label(p))],
            None,
        );
        b.output_of(compress, compress_tmpl.output_size.output_gb(merged_gb));
    }

    Ok(b.dag)
}

/// Number of distinct invocation signatures among the read-set-consuming
/// alignment instances; the generator's redundancy makes this
/// `n_tumor + n_control` regardless of the pair count.
pub fn distinct_alignment_signatures(dag: &WorkflowDag) -> usize {
    let mut seen = std::collections::HashSet::new();
    for task in &dag.tasks {
        if ALIGN_ENTRY_TEMPLATES.contains(&task.template.as_str()) {
            seen.insert(signature(task));
        }
    }
    seen.len()
}

/// Instances per template name, for count checks and reports.
pub fn count_by_template(dag: &WorkflowDag) -> std::collections::BTreeMap<String, usize> {
    let mut counts = std::collections::BTreeMap::new();
    for task in &dag.tasks {
        *counts.entry(task.template.clone()).or_insert(0) += 1;
    }
    counts
}
