//! Grid orchestration: one declarative config expands into (model x task x
//! checkpoint x real/control) jobs, which are cache-checked, executed in
//! parallel, persisted for resumption and collected into result files and the
//! report bundle.
//!
//! Output directory layout:
//!
//! ```text
//! results.jsonl        one JobResult per planned job, in plan order
//! manifest.jsonl       run header line, then one line per job
//! trajectories.jsonl   per-point trajectory records (controls averaged over seeds)
//! accuracy.csv         one row per ok job
//! stabilization.csv    per-trajectory stabilization step at the configured epsilon
//! comparison-<model>.csv, trajectories-<model>.svg
//! class_balance.csv, class_balance.svg
//! jobs/<fingerprint>.json  completed results, reused on re-run
//! ```

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::compose::{build_features, index_records, Method};
use crate::embedcache::{
    cache_path, read_cache, read_index, stored_checksum, CacheKey, CacheRecord, EntryStatus,
    IndexEntry, PayloadKind,
};
use crate::mpscore::{scores_from_records, task_accuracy};
use crate::probe::{self, design_matrix, encode_labels, predict_indices, ProbeConfig};
use crate::report::{
    accuracy_csv, balance_csv, comparison_csv, render_class_balance, render_comparison,
    render_trajectories, AccuracyRow, ChartStyle, Palette, ReportError,
};
use crate::taskset::{
    load_classification_task, load_minimal_pairs, load_minimal_pairs_as, minimal_pairs_name,
    ordered_distribution, shuffle_labels, split_dataset, Level, MinimalPairTask, ProbingTask,
    Split, TaskError, TaskSchema, DEFAULT_RATIOS,
};
use crate::trajectory::{
    assemble, settled_before_end, stabilization_point, steps_to_sentences, Architecture,
    ModelProfile, PointKind, TaskMeta, Trajectory, TrajectoryError, TrajectoryRecord,
    DEFAULT_EPSILON,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("task file {path}: {source}")]
    Task {
        path: PathBuf,
        #[source]
        source: TaskError,
    },
    #[error(transparent)]
    Cache(#[from] crate::embedcache::CacheError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

pub type Result<T> = std::result::Result<T, RunError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Split names probed for cache files, in lookup order.
pub const CACHE_SPLITS: [&str; 4] = ["all", "train", "dev", "test"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TaskSpec {
    Classification {
        schema: PathBuf,
        data: PathBuf,
        /// Defaults to the method matching the task kind.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        method: Option<Method>,
    },
    MinimalPairs {
        data: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        level: Option<Level>,
    },
}

/// Externally known accuracies for a (model, task), e.g. published numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub model: String,
    pub task: String,
    #[serde(default)]
    pub reference: Option<f64>,
    /// Overrides the shuffled-label control as the baseline.
    #[serde(default)]
    pub baseline: Option<f64>,
}

/// External command that produces missing caches. Invoked once per task with
/// `--spec <spec> --task <task data file> --out <cache root>` appended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorHook {
    pub command: Vec<String>,
    pub spec: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub cache_root: PathBuf,
    pub output_dir: PathBuf,
    /// Seed for dataset splits.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_ratios")]
    pub split_ratios: [f64; 3],
    #[serde(default = "default_control_seeds")]
    pub control_seeds: Vec<u64>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Worker threads; 0 means one per hardware thread.
    #[serde(default)]
    pub jobs: usize,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub palette: Palette,
    #[serde(default)]
    pub models: Vec<ModelProfile>,
    #[serde(default)]
    pub tasks: Vec<TaskSpec>,
    #[serde(default)]
    pub references: Vec<Reference>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extractor: Option<ExtractorHook>,
}

fn default_ratios() -> [f64; 3] {
    DEFAULT_RATIOS
}

fn default_control_seeds() -> Vec<u64> {
    vec![1]
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

impl RunConfig {
    /// Parses TOML; relative paths are resolved against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| RunError::Config {
            path: base_dir.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base).map_err(|e| match e {
            RunError::Config { message, .. } => RunError::Config {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.cache_root);
        fix(&mut self.output_dir);
        for t in &mut self.tasks {
            match t {
                TaskSpec::Classification { schema, data, .. } => {
                    fix(schema);
                    fix(data);
                }
                TaskSpec::MinimalPairs { data, .. } => fix(data),
            }
        }
        if let Some(hook) = &mut self.extractor {
            fix(&mut hook.spec);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RunError::Invalid(m));
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!(
                "epsilon must be finite and > 0, got {}",
                self.epsilon
            ));
        }
        let r = self.split_ratios;
        if r.iter().any(|v| !(v.is_finite() && *v > 0.0))
            || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad(format!(
                "split_ratios must be positive and sum to 1, got {r:?}"
            ));
        }
        let mut seeds = self.control_seeds.clone();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return bad("control_seeds contains duplicates".into());
        }
        self.probe
            .validate()
            .map_err(|e| RunError::Invalid(format!("probe: {e}")))?;
        let mut ids: Vec<&str> = Vec::new();
        for m in &self.models {
            if m.model_id.is_empty() {
                return bad("model_id must not be empty".into());
            }
            if ids.contains(&m.model_id.as_str()) {
                return bad(format!("duplicate model_id `{}`", m.model_id));
            }
            ids.push(&m.model_id);
            if m.batch_size == 0 || m.steps_per_unit == 0 {
                return bad(format!(
                    "model `{}`: batch_size and steps_per_unit must be > 0",
                    m.model_id
                ));
            }
            let mut steps = m.checkpoint_steps.clone();
            steps.sort_unstable();
            if let Some(w) = steps.windows(2).find(|w| w[0] == w[1]) {
                return bad(format!(
                    "model `{}`: duplicate checkpoint step {}",
                    m.model_id, w[0]
                ));
            }
        }
        if !self.tasks.is_empty() && self.models.is_empty() {
            return bad("tasks are listed but no models".into());
        }
        if let Some(hook) = &self.extractor {
            if hook.command.is_empty() {
                return bad("extractor.command must not be empty".into());
            }
        }
        Ok(())
    }

    /// SHA-256 of the resolved config with the parallelism setting cleared,
    /// since worker count never changes results.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.jobs = 0;
        sha256_hex(
            serde_json::to_string(&c)
                .expect("config serializes")
                .as_bytes(),
        )
    }

    pub fn probe_config_hash(&self) -> String {
        let h = sha256_hex(
            serde_json::to_string(&self.probe)
                .expect("probe config serializes")
                .as_bytes(),
        );
        h[..16].to_string()
    }

    fn model(&self, id: &str) -> Option<&ModelProfile> {
        self.models.iter().find(|m| m.model_id == id)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A task loaded from disk, with a hash of the files it came from.
#[derive(Debug, Clone)]
pub enum LoadedTask {
    Classification {
        task: ProbingTask,
        method: Method,
        source_hash: String,
    },
    MinimalPairs {
        task: MinimalPairTask,
        source_hash: String,
    },
}

impl LoadedTask {
    pub fn name(&self) -> &str {
        match self {
            LoadedTask::Classification { task, .. } => task.name(),
            LoadedTask::MinimalPairs { task, .. } => &task.name,
        }
    }

    pub fn level(&self) -> Level {
        match self {
            LoadedTask::Classification { task, .. } => task.level(),
            LoadedTask::MinimalPairs { task, .. } => task.level,
        }
    }

    pub fn payload_kind(&self) -> PayloadKind {
        match self {
            LoadedTask::Classification { .. } => PayloadKind::TokenEmbeddings,
            LoadedTask::MinimalPairs { .. } => PayloadKind::MaskedLogprobs,
        }
    }

    fn source_hash(&self) -> &str {
        match self {
            LoadedTask::Classification { source_hash, .. }
            | LoadedTask::MinimalPairs { source_hash, .. } => source_hash,
        }
    }
}

fn hash_files(paths: &[&Path]) -> Result<String> {
    let mut h = Sha256::new();
    for p in paths {
        let bytes = fs::read(p).map_err(io_err(p))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

/// Loads every task in config order; task names must be unique.
pub fn load_tasks(config: &RunConfig) -> Result<Vec<LoadedTask>> {
    let mut out: Vec<LoadedTask> = Vec::with_capacity(config.tasks.len());
    for spec in &config.tasks {
        let loaded = match spec {
            TaskSpec::Classification {
                schema,
                data,
                method,
            } => {
                let sch = TaskSchema::from_toml_file(schema).map_err(|source| RunError::Task {
                    path: schema.clone(),
                    source,
                })?;
                let task =
                    load_classification_task(data, &sch).map_err(|source| RunError::Task {
                        path: data.clone(),
                        source,
                    })?;
                LoadedTask::Classification {
                    method: method.unwrap_or_else(|| Method::for_kind(task.kind())),
                    task,
                    source_hash: hash_files(&[schema, data])?,
                }
            }
            TaskSpec::MinimalPairs { data, name, level } => {
                let task = match (name, level) {
                    (None, None) => load_minimal_pairs(data),
                    _ => name
                        .clone()
                        .map(Ok)
                        .unwrap_or_else(|| minimal_pairs_name(data))
                        .and_then(|n| {
                            let level = level
                                .or_else(|| Level::for_task(&n))
                                .ok_or_else(|| TaskError::UnknownLevel(n.clone()))?;
                            load_minimal_pairs_as(data, &n, level)
                        }),
                }
                .map_err(|source| RunError::Task {
                    path: data.clone(),
                    source,
                })?;
                LoadedTask::MinimalPairs {
                    task,
                    source_hash: hash_files(&[data])?,
                }
            }
        };
        if out.iter().any(|t| t.name() == loaded.name()) {
            return Err(RunError::Invalid(format!(
                "duplicate task name `{}`",
                loaded.name()
            )));
        }
        out.push(loaded);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct JobKey {
    pub model: String,
    pub task: String,
    pub step: u64,
    pub kind: PointKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_seed: Option<u64>,
}

impl std::fmt::Display for JobKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}/{}/{}/{}",
            self.model,
            self.task,
            self.step,
            self.kind.as_str()
        )?;
        if let Some(s) = self.control_seed {
            write!(f, "#{s}")?;
        }
        Ok(())
    }
}

/// What the planner found for a job's input.
#[derive(Debug, Clone, PartialEq)]
pub enum JobInput {
    Ready(Vec<PathBuf>),
    /// Missing, but an extractor hook is configured to produce it.
    PendingExtraction,
    Missing,
    Unsupported(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub key: JobKey,
    pub level: Level,
    pub task_index: usize,
    pub input: JobInput,
}

#[derive(Debug, Clone)]
pub struct Plan {
    pub config: RunConfig,
    pub tasks: Vec<LoadedTask>,
    pub jobs: Vec<Job>,
    pub warnings: Vec<String>,
}

/// Committed files and unsupported markers for one (model, step, task, kind).
fn locate(
    root: &Path,
    index: &[IndexEntry],
    model: &str,
    step: u64,
    task: &str,
    kind: PayloadKind,
) -> JobInput {
    let matches = |e: &&IndexEntry| {
        e.model_id == model && e.checkpoint_step == step && e.task == task && e.kind == kind
    };
    if index
        .iter()
        .filter(matches)
        .any(|e| e.status == EntryStatus::Unsupported)
    {
        return JobInput::Unsupported("extractor marked this payload unsupported".into());
    }
    let mut files: Vec<PathBuf> = CACHE_SPLITS
        .iter()
        .map(|split| cache_path(root, &CacheKey::new(model, step, task, *split, kind)))
        .filter(|p| p.is_file())
        .collect();
    for e in index.iter().filter(matches) {
        if let Some(rel) = &e.path {
            let p = root.join(rel);
            if p.is_file() && !files.contains(&p) {
                files.push(p);
            }
        }
    }
    files.sort();
    if files.is_empty() {
        JobInput::Missing
    } else {
        JobInput::Ready(files)
    }
}

fn plan_inputs(
    config: &RunConfig,
    tasks: &[LoadedTask],
    keys: &[(JobKey, usize)],
) -> Result<Vec<JobInput>> {
    let index = read_index(&config.cache_root)?;
    Ok(keys
        .iter()
        .map(|(key, ti)| {
            let task = &tasks[*ti];
            let model = config.model(&key.model).expect("planned model exists");
            if matches!(task, LoadedTask::MinimalPairs { .. })
                && model.architecture == Architecture::EncoderDecoder
            {
                return JobInput::Unsupported(
                    "masked-token scoring needs an encoder-only model".into(),
                );
            }
            match locate(
                &config.cache_root,
                &index,
                &key.model,
                key.step,
                &key.task,
                task.payload_kind(),
            ) {
                JobInput::Missing if config.extractor.is_some() => JobInput::PendingExtraction,
                other => other,
            }
        })
        .collect())
}

/// Expands the config into an ordered job list: models in config order, then
/// tasks, then ascending checkpoint steps, then the real job followed by one
/// control job per control seed. Minimal-pair tasks get a single job per
/// checkpoint.
pub fn plan(config: &RunConfig) -> Result<Plan> {
    config.validate()?;
    let tasks = load_tasks(config)?;
    let mut warnings = Vec::new();
    if tasks.is_empty() {
        warnings.push("task list is empty; nothing to run".to_string());
    }
    for t in &tasks {
        if let LoadedTask::MinimalPairs { task, .. } = t {
            warnings.extend(task.warnings.iter().map(|w| format!("{}: {w}", task.name)));
        }
    }
    let mut keys = Vec::new();
    for m in &config.models {
        let mut steps = m.checkpoint_steps.clone();
        steps.sort_unstable();
        for (ti, t) in tasks.iter().enumerate() {
            for &step in &steps {
                let key = |kind, control_seed| JobKey {
                    model: m.model_id.clone(),
                    task: t.name().to_string(),
                    step,
                    kind,
                    control_seed,
                };
                keys.push((key(PointKind::Real, None), ti));
                if matches!(t, LoadedTask::Classification { .. }) {
                    for &s in &config.control_seeds {
                        keys.push((key(PointKind::Control, Some(s)), ti));
                    }
                }
            }
        }
    }
    let inputs = plan_inputs(config, &tasks, &keys)?;
    let jobs = keys
        .into_iter()
        .zip(inputs)
        .map(|((key, task_index), input)| Job {
            level: tasks[task_index].level(),
            key,
            task_index,
            input,
        })
        .collect();
    Ok(Plan {
        config: config.clone(),
        tasks,
        jobs,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Ok,
    SkippedMissingCache,
    Unsupported,
    Failed,
}

impl JobStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            JobStatus::Ok => "ok",
            JobStatus::SkippedMissingCache => "skipped_missing_cache",
            JobStatus::Unsupported => "unsupported",
            JobStatus::Failed => "failed",
        }
    }
}

/// Probe telemetry without the loss history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub iters_used: usize,
    pub final_loss: f64,
    pub final_grad_norm: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    #[serde(flatten)]
    pub key: JobKey,
    pub level: Level,
    pub status: JobStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_train: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_test: Option<usize>,
    /// Share of the most frequent label among evaluated examples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub majority_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl JobResult {
    fn bare(job: &Job, status: JobStatus, error: Option<String>) -> Self {
        JobResult {
            key: job.key.clone(),
            level: job.level,
            status,
            accuracy: None,
            n_train: None,
            n_test: None,
            majority_rate: None,
            probe: None,
            error,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// One result per planned job, in plan order.
    pub results: Vec<JobResult>,
    /// Jobs answered from persisted results instead of recomputed.
    pub resumed: usize,
    pub warnings: Vec<String>,
}

impl RunOutcome {
    /// True when every job that was not skipped or unsupported finished ok.
    pub fn all_ok(&self) -> bool {
        self.results.iter().all(|r| r.status != JobStatus::Failed)
    }

    pub fn counts(&self) -> BTreeMap<JobStatus, usize> {
        let mut m = BTreeMap::new();
        for r in &self.results {
            *m.entry(r.status).or_insert(0) += 1;
        }
        m
    }
}

fn load_records(
    files: &[PathBuf],
    key: &JobKey,
    kind: PayloadKind,
) -> std::result::Result<Vec<CacheRecord>, String> {
    let mut all: Vec<CacheRecord> = Vec::new();
    for f in files {
        let (ck, records) =
            read_cache(f).map_err(|e| format!("{}: {} ({e})", f.display(), e.code()))?;
        if ck.model_id != key.model
            || ck.checkpoint_step != key.step
            || ck.task_name != key.task
            || ck.payload_kind != kind
        {
            return Err(format!(
                "{}: header key {}/{}/{}/{} does not match the job",
                f.display(),
                ck.model_id,
                ck.checkpoint_step,
                ck.task_name,
                ck.payload_kind
            ));
        }
        all.extend(records);
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = all.iter().find(|r| !seen.insert(r.example_id.as_str())) {
        return Err(format!(
            "record `{}` appears in more than one cache file",
            dup.example_id
        ));
    }
    Ok(all)
}

fn probe_job(
    config: &RunConfig,
    task: &ProbingTask,
    method: Method,
    job: &Job,
    files: &[PathBuf],
) -> std::result::Result<JobResult, String> {
    let records = load_records(files, &job.key, PayloadKind::TokenEmbeddings)?;
    let index = index_records(&records);
    let task: Cow<'_, ProbingTask> = match job.key.control_seed {
        Some(seed) => Cow::Owned(shuffle_labels(task, seed)),
        None => Cow::Borrowed(task),
    };
    let split = match Split::from_tags(&task) {
        Some(s) => s,
        None => {
            split_dataset(&task, config.split_ratios, config.seed).map_err(|e| e.to_string())?
        }
    };
    let labels_of = |idx: &[usize]| -> Vec<&str> {
        idx.iter()
            .map(|&i| task.examples()[i].label.as_str())
            .collect()
    };
    let order = task.label_set().to_vec();
    let train_x = build_features(&task, &split.train, &index, method).map_err(|e| e.to_string())?;
    let test_x = build_features(&task, &split.test, &index, method).map_err(|e| e.to_string())?;
    let y_train = encode_labels(&labels_of(&split.train), &order).map_err(|e| e.to_string())?;
    let y_test = encode_labels(&labels_of(&split.test), &order).map_err(|e| e.to_string())?;
    let model = probe::train(
        design_matrix(&train_x).view(),
        &y_train,
        order,
        &config.probe,
    )
    .map_err(|e| e.to_string())?;
    let pred = predict_indices(&model, design_matrix(&test_x).view()).map_err(|e| e.to_string())?;
    let acc = probe::accuracy(&pred, &y_test).map_err(|e| e.to_string())?;
    let mut counts = vec![0usize; task.label_set().len()];
    for &y in &y_test {
        counts[y] += 1;
    }
    let t = &model.telemetry;
    Ok(JobResult {
        accuracy: Some(acc),
        n_train: Some(y_train.len()),
        n_test: Some(y_test.len()),
        majority_rate: Some(*counts.iter().max().unwrap_or(&0) as f64 / y_test.len() as f64),
        probe: Some(ProbeSummary {
            iters_used: t.iters_used,
            final_loss: t.final_loss,
            final_grad_norm: t.final_grad_norm,
            converged: t.converged,
        }),
        ..JobResult::bare(job, JobStatus::Ok, None)
    })
}

fn pair_job(
    task: &MinimalPairTask,
    job: &Job,
    files: &[PathBuf],
) -> std::result::Result<JobResult, String> {
    let records = load_records(files, &job.key, PayloadKind::MaskedLogprobs)?;
    let scores = scores_from_records(&records).map_err(|e| e.to_string())?;
    let acc = task_accuracy(task, &scores).map_err(|e| e.to_string())?;
    Ok(JobResult {
        accuracy: Some(acc),
        n_test: Some(task.pairs.len()),
        ..JobResult::bare(job, JobStatus::Ok, None)
    })
}

#[derive(Serialize)]
struct FingerprintInput<'a> {
    version: u32,
    key: &'a JobKey,
    probe: &'a ProbeConfig,
    seed: u64,
    split_ratios: [f64; 3],
    task_source: &'a str,
    caches: Vec<(String, u64, u64)>,
}

/// Content address of a job: its key, everything in the config that can
/// change its result, the task files and the cache files' stored checksums.
fn fingerprint(plan: &Plan, job: &Job, files: &[PathBuf]) -> std::result::Result<String, String> {
    let caches = files
        .iter()
        .map(|f| {
            let len = fs::metadata(f)
                .map_err(|e| format!("{}: {e}", f.display()))?
                .len();
            let sum =
                stored_checksum(f).map_err(|e| format!("{}: {} ({e})", f.display(), e.code()))?;
            let rel = f.strip_prefix(&plan.config.cache_root).unwrap_or(f);
            Ok((rel.to_string_lossy().replace('\\', "/"), len, sum))
        })
        .collect::<std::result::Result<Vec<_>, String>>()?;
    let input = FingerprintInput {
        version: 1,
        key: &job.key,
        probe: &plan.config.probe,
        seed: plan.config.seed,
        split_ratios: plan.config.split_ratios,
        task_source: plan.tasks[job.task_index].source_hash(),
        caches,
    };
    Ok(sha256_hex(
        serde_json::to_string(&input)
            .expect("fingerprint serializes")
            .as_bytes(),
    ))
}

fn jobs_dir(config: &RunConfig) -> PathBuf {
    config.output_dir.join("jobs")
}

fn load_persisted(path: &Path, key: &JobKey) -> Option<JobResult> {
    let text = fs::read_to_string(path).ok()?;
    let r: JobResult = serde_json::from_str(&text).ok()?;
    (r.status == JobStatus::Ok && &r.key == key).then_some(r)
}

fn persist(path: &Path, result: &JobResult) -> std::io::Result<()> {
    let tmp = path.with_extension("json.partial");
    let mut f = fs::File::create(&tmp)?;
    serde_json::to_writer(&mut f, result)?;
    f.write_all(b"\n")?;
    drop(f);
    fs::rename(tmp, path)
}

/// Runs one job; never panics on bad inputs, every failure becomes a
/// `failed` result. Returns whether the result came from a persisted file.
fn run_job(plan: &Plan, job: &Job, input: &JobInput) -> (JobResult, bool) {
    let files = match input {
        JobInput::Ready(files) => files,
        JobInput::Unsupported(why) => {
            return (
                JobResult::bare(job, JobStatus::Unsupported, Some(why.clone())),
                false,
            )
        }
        JobInput::Missing => {
            return (
                JobResult::bare(job, JobStatus::SkippedMissingCache, None),
                false,
            )
        }
        JobInput::PendingExtraction => {
            return (
                JobResult::bare(
                    job,
                    JobStatus::SkippedMissingCache,
                    Some("extractor hook did not produce the cache".into()),
                ),
                false,
            )
        }
    };
    let fp = match fingerprint(plan, job, files) {
        Ok(fp) => fp,
        Err(e) => return (JobResult::bare(job, JobStatus::Failed, Some(e)), false),
    };
    let stored = jobs_dir(&plan.config).join(format!("{fp}.json"));
    if let Some(r) = load_persisted(&stored, &job.key) {
        return (r, true);
    }
    let result = match &plan.tasks[job.task_index] {
        LoadedTask::Classification { task, method, .. } => {
            probe_job(&plan.config, task, *method, job, files)
        }
        LoadedTask::MinimalPairs { task, .. } => pair_job(task, job, files),
    };
    match result {
        Ok(r) => {
            if let Err(e) = persist(&stored, &r) {
                warn!("could not persist {}: {e}", job.key);
            }
            (r, false)
        }
        Err(e) => (JobResult::bare(job, JobStatus::Failed, Some(e)), false),
    }
}

fn task_source_path(config: &RunConfig, task_index: usize) -> &Path {
    match &config.tasks[task_index] {
        TaskSpec::Classification { data, .. } | TaskSpec::MinimalPairs { data, .. } => data,
    }
}

/// Invokes the extractor hook for each task with pending caches.
fn run_extractor(plan: &Plan, hook: &ExtractorHook) -> Vec<String> {
    let mut warnings = Vec::new();
    let mut pending: Vec<usize> = plan
        .jobs
        .iter()
        .filter(|j| j.input == JobInput::PendingExtraction)
        .map(|j| j.task_index)
        .collect();
    pending.dedup();
    pending.sort_unstable();
    pending.dedup();
    for ti in pending {
        let task_path = task_source_path(&plan.config, ti);
        info!("extracting caches for task `{}`", plan.tasks[ti].name());
        let status = Command::new(&hook.command[0])
            .args(&hook.command[1..])
            .arg("--spec")
            .arg(&hook.spec)
            .arg("--task")
            .arg(task_path)
            .arg("--out")
            .arg(&plan.config.cache_root)
            .status();
        match status {
            Ok(s) if s.success() => {}
            Ok(s) => warnings.push(format!(
                "extractor for `{}` exited with {s}",
                plan.tasks[ti].name()
            )),
            Err(e) => warnings.push(format!(
                "extractor for `{}` could not start: {e}",
                plan.tasks[ti].name()
            )),
        }
    }
    warnings
}

/// Executes every job of `plan` on a pool of `config.jobs` workers. Results
/// come back in plan order regardless of scheduling.
pub fn execute(plan: &Plan) -> Result<RunOutcome> {
    let mut warnings = Vec::new();
    let mut inputs: Vec<JobInput> = plan.jobs.iter().map(|j| j.input.clone()).collect();
    if let Some(hook) = &plan.config.extractor {
        if inputs.contains(&JobInput::PendingExtraction) {
            warnings.extend(run_extractor(plan, hook));
            let keys: Vec<(JobKey, usize)> = plan
                .jobs
                .iter()
                .map(|j| (j.key.clone(), j.task_index))
                .collect();
            let fresh = plan_inputs(&plan.config, &plan.tasks, &keys)?;
            for (slot, new) in inputs.iter_mut().zip(fresh) {
                if *slot == JobInput::PendingExtraction {
                    *slot = new;
                }
            }
        }
    }
    let dir = jobs_dir(&plan.config);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.config.jobs)
        .build()
        .map_err(|e| RunError::Invalid(format!("thread pool: {e}")))?;
    let out: Vec<(JobResult, bool)> = pool.install(|| {
        plan.jobs
            .par_iter()
            .zip(inputs.par_iter())
            .map(|(job, input)| run_job(plan, job, input))
            .collect()
    });
    let resumed = out.iter().filter(|(_, r)| *r).count();
    let results: Vec<JobResult> = out.into_iter().map(|(r, _)| r).collect();
    for r in results.iter().filter(|r| r.status == JobStatus::Failed) {
        warn!("job {} failed: {}", r.key, r.error.as_deref().unwrap_or(""));
    }
    Ok(RunOutcome {
        results,
        resumed,
        warnings,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, &item).expect("record serializes");
        out.push(b'\n');
    }
    out
}

pub fn read_results(path: &Path) -> Result<Vec<JobResult>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| RunError::Record {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Assembles real and control trajectories per (model, task) from ok
/// results. Control points average the seeds available at each step.
pub fn build_trajectories(
    config: &RunConfig,
    tasks: &[LoadedTask],
    results: &[JobResult],
) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for m in &config.models {
        for t in tasks {
            for kind in [PointKind::Real, PointKind::Control] {
                let mut by_step: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
                for r in results.iter().filter(|r| {
                    r.status == JobStatus::Ok
                        && r.key.model == m.model_id
                        && r.key.task == t.name()
                        && r.key.kind == kind
                }) {
                    if let Some(a) = r.accuracy {
                        by_step.entry(r.key.step).or_default().push(a);
                    }
                }
                if by_step.is_empty() {
                    continue;
                }
                let points: Vec<(u64, f64)> = by_step
                    .into_iter()
                    .map(|(s, v)| (s, v.iter().sum::<f64>() / v.len() as f64))
                    .collect();
                let mut traj = assemble(
                    &points,
                    &TaskMeta {
                        model_id: m.model_id.clone(),
                        task_name: t.name().to_string(),
                        level: t.level(),
                        kind,
                    },
                )?;
                traj.incomplete = points.len() < m.checkpoint_steps.len();
                if let Some(r) = config
                    .references
                    .iter()
                    .find(|r| r.model == m.model_id && r.task == t.name())
                {
                    traj.reference_accuracy = r.reference;
                    traj.baseline_accuracy = r.baseline;
                }
                out.push(traj);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilizationRow {
    pub model: String,
    pub task: String,
    pub level: Level,
    pub kind: PointKind,
    pub epsilon: f64,
    pub stabilization_step: u64,
    /// False when only the final checkpoint is within epsilon of itself.
    pub settled_before_end: bool,
    pub final_accuracy: f64,
}

fn file_component(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Files written by [`write_report`], relative to the output directory.
#[derive(Debug, Clone, Default)]
pub struct ReportFiles {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

/// Writes the report bundle and trajectory records for `results`.
pub fn write_report(
    config: &RunConfig,
    tasks: &[LoadedTask],
    results: &[JobResult],
) -> Result<ReportFiles> {
    let dir = &config.output_dir;
    let mut files = ReportFiles::default();
    let mut emit = |name: String, bytes: &[u8]| -> Result<()> {
        write_file(&dir.join(&name), bytes)?;
        files.files.push(PathBuf::from(name));
        Ok(())
    };

    let rows: Vec<AccuracyRow> = results
        .iter()
        .filter(|r| r.status == JobStatus::Ok)
        .filter_map(|r| {
            let profile = config.model(&r.key.model)?;
            Some(AccuracyRow {
                model: r.key.model.clone(),
                task: r.key.task.clone(),
                level: r.level,
                step: r.key.step,
                sentences_seen: steps_to_sentences(r.key.step, profile),
                kind: r.key.kind,
                accuracy: r.accuracy?,
            })
        })
        .collect();
    emit("accuracy.csv".into(), accuracy_csv(&rows)?.as_bytes())?;

    let trajectories = build_trajectories(config, tasks, results)?;
    let hash = config.probe_config_hash();
    let mut records: Vec<TrajectoryRecord> = Vec::new();
    let mut stab = csv::Writer::from_writer(Vec::new());
    for t in &trajectories {
        let profile = config.model(&t.model_id).expect("trajectory model exists");
        records.extend(t.to_records(profile, &hash));
        stab.serialize(StabilizationRow {
            model: t.model_id.clone(),
            task: t.task_name.clone(),
            level: t.level,
            kind: t.kind,
            epsilon: config.epsilon,
            stabilization_step: stabilization_point(t, config.epsilon)?,
            settled_before_end: settled_before_end(t, config.epsilon)?.is_some(),
            final_accuracy: t.final_point().expect("non-empty").accuracy,
        })
        .map_err(ReportError::from)?;
    }
    emit("trajectories.jsonl".into(), &jsonl(&records))?;
    let stab = stab
        .into_inner()
        .map_err(|e| RunError::Report(ReportError::Io(e.into_error())))?;
    emit("stabilization.csv".into(), &stab)?;

    for m in &config.models {
        let mine: Vec<&Trajectory> = trajectories
            .iter()
            .filter(|t| t.model_id == m.model_id)
            .collect();
        let real: Vec<Trajectory> = mine
            .iter()
            .filter(|t| t.kind == PointKind::Real)
            .map(|t| (*t).clone())
            .collect();
        if real.is_empty() {
            files.warnings.push(format!(
                "model `{}` has no ok results; no chart",
                m.model_id
            ));
            continue;
        }
        let style = ChartStyle {
            palette: config.palette.clone(),
            title: m.model_id.clone(),
            steps_per_unit: m.steps_per_unit,
            batch_size: Some(m.batch_size),
            ..ChartStyle::default()
        };
        let svg = render_trajectories(&real, &style)?;
        emit(
            format!("trajectories-{}.svg", file_component(&m.model_id)),
            svg.as_bytes(),
        )?;

        let finals: Vec<(String, f64)> = real
            .iter()
            .filter_map(|t| Some((t.task_name.clone(), t.final_point()?.accuracy)))
            .collect();
        let reference: Vec<(String, f64)> = config
            .references
            .iter()
            .filter(|r| r.model == m.model_id)
            .filter_map(|r| Some((r.task.clone(), r.reference?)))
            .collect();
        let mut baseline: Vec<(String, f64)> = Vec::new();
        for t in tasks {
            let configured = config
                .references
                .iter()
                .find(|r| r.model == m.model_id && r.task == t.name())
                .and_then(|r| r.baseline);
            let control = mine
                .iter()
                .find(|c| c.kind == PointKind::Control && c.task_name == t.name())
                .and_then(|c| c.final_point())
                .map(|p| p.accuracy);
            if let Some(b) = configured.or(control) {
                baseline.push((t.name().to_string(), b));
            }
        }
        let table = render_comparison(&finals, &reference, &baseline);
        emit(
            format!("comparison-{}.csv", file_component(&m.model_id)),
            comparison_csv(&table)?.as_bytes(),
        )?;
    }

    let hists: Vec<(String, Vec<(String, usize)>)> = tasks
        .iter()
        .filter_map(|t| match t {
            LoadedTask::Classification { task, .. } => {
                Some((task.name().to_string(), ordered_distribution(task)))
            }
            LoadedTask::MinimalPairs { .. } => None,
        })
        .collect();
    if !hists.is_empty() {
        let balance = render_class_balance(&hists);
        emit(
            "class_balance.csv".into(),
            balance_csv(&balance.rows)?.as_bytes(),
        )?;
        emit("class_balance.svg".into(), balance.svg.as_bytes())?;
        files.warnings.extend(balance.warnings);
    }
    Ok(files)
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum ManifestLine<'a> {
    Run {
        config_hash: String,
        probe_config_hash: String,
        seed: u64,
        epsilon: f64,
        job_count: usize,
    },
    Job {
        #[serde(flatten)]
        key: &'a JobKey,
        status: JobStatus,
    },
}

/// Writes `results.jsonl`, `manifest.jsonl` and the report bundle.
pub fn write_outputs(plan: &Plan, outcome: &RunOutcome) -> Result<ReportFiles> {
    let cfg = &plan.config;
    write_file(
        &cfg.output_dir.join("results.jsonl"),
        &jsonl(&outcome.results),
    )?;
    let header = ManifestLine::Run {
        config_hash: cfg.config_hash(),
        probe_config_hash: cfg.probe_config_hash(),
        seed: cfg.seed,
        epsilon: cfg.epsilon,
        job_count: outcome.results.len(),
    };
    let lines = std::iter::once(header).chain(outcome.results.iter().map(|r| ManifestLine::Job {
        key: &r.key,
        status: r.status,
    }));
    write_file(&cfg.output_dir.join("manifest.jsonl"), &jsonl(lines))?;
    let mut files = write_report(cfg, &plan.tasks, &outcome.results)?;
    files.files.splice(
        0..0,
        [
            PathBuf::from("results.jsonl"),
            PathBuf::from("manifest.jsonl"),
        ],
    );
    Ok(files)
}

/// Plan, execute and write every output for `config`.
pub fn run(config: &RunConfig) -> Result<(Plan, RunOutcome)> {
    let plan = plan(config)?;
    for w in &plan.warnings {
        warn!("{w}");
    }
    let mut outcome = execute(&plan)?;
    let files = write_outputs(&plan, &outcome)?;
    outcome.warnings.extend(plan.warnings.iter().cloned());
    outcome.warnings.extend(files.warnings);
    Ok((plan, outcome))
}

/// Regenerates the report bundle from an existing `results.jsonl`.
pub fn report_from_results(config: &RunConfig) -> Result<ReportFiles> {
    let tasks = load_tasks(config)?;
    let results = read_results(&config.output_dir.join("results.jsonl"))?;
    write_report(config, &tasks, &results)
}

/// Accuracy by job key, convenient for tests and examples.
pub fn accuracies(results: &[JobResult]) -> HashMap<JobKey, f64> {
    results
        .iter()
        .filter_map(|r| Some((r.key.clone(), r.accuracy?)))
        .collect()
}
