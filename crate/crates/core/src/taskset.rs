//! Probing datasets: classification tasks, minimal-pair tasks, splits and the
//! shuffled-label control transformation.
//!
//! Classification tasks are read through a [`TaskSchema`] that names which
//! fields hold sentences, the label and (optionally) a shipped split tag. Two
//! on-disk layouts are understood: tab-separated rows (SentEval style) and
//! line-delimited JSON records with named fields (pair / sequence tasks).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid task schema {path}: {message}")]
    Schema { path: PathBuf, message: String },
    #[error("row {row}: expected at least {expected} fields, found {found}")]
    FieldCount {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("row {row}: label field is empty")]
    EmptyLabel { row: usize },
    #[error("row {row}: sentence field `{field}` is empty")]
    EmptySentence { row: usize, field: String },
    #[error("row {row}: missing field `{field}`")]
    MissingField { row: usize, field: String },
    #[error("row {row}: malformed record: {message}")]
    Malformed { row: usize, message: String },
    #[error("duplicate example id `{0}`")]
    DuplicateId(String),
    #[error("label `{label}` of example `{id}` is not in the label set")]
    UnknownLabel { id: String, label: String },
    #[error("label set needs at least 2 labels, found {0}")]
    TooFewLabels(usize),
    #[error("example `{id}` has {found} sentences, task kind requires {expected}")]
    SentenceCount {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("pair `{0}`: acceptable and unacceptable sentences are identical")]
    IdenticalPair(String),
    #[error("duplicate pair id `{0}`")]
    DuplicatePairId(String),
    #[error("no linguistic level known for task `{0}`; declare it explicitly")]
    UnknownLevel(String),
    #[error("invalid split ratios {0:?}: must be positive and sum to 1")]
    BadRatios([f64; 3]),
    #[error(
        "cannot split {n} examples into three non-empty parts (label set has {labels} labels)"
    )]
    TooFewExamples { n: usize, labels: usize },
    #[error("unknown split tag `{0}`")]
    UnknownSplitTag(String),
}

pub type Result<T> = std::result::Result<T, TaskError>;

/// Linguistic level a task is grouped under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Morphology,
    Syntax,
    Discourse,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Morphology, Level::Syntax, Level::Discourse];

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Morphology => "morphology",
            Level::Syntax => "syntax",
            Level::Discourse => "discourse",
        }
    }

    /// Fixed grouping of the twelve standard tasks. Names are matched after
    /// lower-casing and folding spaces/dashes to underscores.
    pub fn for_task(name: &str) -> Option<Level> {
        let key: String = name
            .trim()
            .to_ascii_lowercase()
            .chars()
            .map(|c| if c == ' ' || c == '-' { '_' } else { c })
            .collect();
        let level = match key.as_str() {
            "subject_number" | "subj_number" | "person" | "transitive" | "passive"
            | "passive_1" | "passive_2" => Level::Morphology,
            "tree_depth"
            | "top_constituents"
            | "top_const"
            | "principle_a"
            | "principle_a_c_command"
            | "adjunct_island" => Level::Syntax,
            "connectors"
            | "dissent"
            | "sentence_position"
            | "sp"
            | "pdtb"
            | "pdtb_relations"
            | "discourse_coherence"
            | "dc" => Level::Discourse,
            _ => return None,
        };
        Some(level)
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SingleSentence,
    SentencePair,
    SentenceSequence,
}

impl TaskKind {
    /// Required number of sentences per example, `None` for sequences whose
    /// length is fixed per task rather than per kind.
    pub fn arity(self) -> Option<usize> {
        match self {
            TaskKind::SingleSentence => Some(1),
            TaskKind::SentencePair => Some(2),
            TaskKind::SentenceSequence => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Dev => "dev",
            SplitName::Test => "test",
        }
    }

    /// Parses the split tags used by SentEval (`tr`/`va`/`te`) and the long forms.
    pub fn parse_tag(tag: &str) -> Option<SplitName> {
        match tag.trim().to_ascii_lowercase().as_str() {
            "tr" | "train" => Some(SplitName::Train),
            "va" | "dev" | "valid" | "validation" => Some(SplitName::Dev),
            "te" | "test" => Some(SplitName::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub sentences: Vec<String>,
    pub label: String,
    /// Split tag shipped with the source dataset, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitName>,
}

/// A labeled classification dataset. Immutable once constructed; the
/// constructor enforces every invariant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbingTask {
    name: String,
    level: Level,
    kind: TaskKind,
    examples: Vec<Example>,
    label_set: Vec<String>,
    /// Set when labels were permuted by [`shuffle_labels`].
    #[serde(default)]
    control: bool,
}

impl ProbingTask {
    /// Builds a task. When `label_set` is `None` it is collected from the
    /// examples in first-appearance order.
    pub fn new(
        name: impl Into<String>,
        level: Level,
        kind: TaskKind,
        examples: Vec<Example>,
        label_set: Option<Vec<String>>,
    ) -> Result<Self> {
        let label_set = match label_set {
            Some(labels) => {
                let mut seen = HashSet::new();
                labels
                    .into_iter()
                    .filter(|l| seen.insert(l.clone()))
                    .collect::<Vec<_>>()
            }
            None => {
                let mut seen = HashSet::new();
                examples
                    .iter()
                    .filter(|e| seen.insert(e.label.as_str()))
                    .map(|e| e.label.clone())
                    .collect()
            }
        };
        if label_set.len() < 2 {
            return Err(TaskError::TooFewLabels(label_set.len()));
        }
        let labels: HashSet<&str> = label_set.iter().map(String::as_str).collect();
        let mut ids = HashSet::new();
        let expected_len = kind
            .arity()
            .or_else(|| examples.first().map(|e| e.sentences.len()));
        for (row, ex) in examples.iter().enumerate() {
            if !ids.insert(ex.id.as_str()) {
                return Err(TaskError::DuplicateId(ex.id.clone()));
            }
            if !labels.contains(ex.label.as_str()) {
                return Err(TaskError::UnknownLabel {
                    id: ex.id.clone(),
                    label: ex.label.clone(),
                });
            }
            if let Some(expected) = expected_len {
                if ex.sentences.len() != expected {
                    return Err(TaskError::SentenceCount {
                        id: ex.id.clone(),
                        expected,
                        found: ex.sentences.len(),
                    });
                }
            }
            if ex.sentences.is_empty() {
                return Err(TaskError::SentenceCount {
                    id: ex.id.clone(),
                    expected: 1,
                    found: 0,
                });
            }
            if let Some(k) = ex.sentences.iter().position(String::is_empty) {
                return Err(TaskError::EmptySentence {
                    row: row + 1,
                    field: k.to_string(),
                });
            }
        }
        Ok(ProbingTask {
            name: name.into(),
            level,
            kind,
            examples,
            label_set,
            control: false,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn label_set(&self) -> &[String] {
        &self.label_set
    }

    pub fn is_control(&self) -> bool {
        self.control
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.examples.iter().map(|e| e.label.as_str())
    }

    /// Index of `label` in the label set.
    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.label_set.iter().position(|l| l == label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileFormat {
    Tsv,
    Jsonl,
}

/// Declares how a dataset file maps onto a [`ProbingTask`].
///
/// For TSV files without a header the field names are zero-based column
/// indices (`"0"`, `"2"`); with `header = true` they are header names. For
/// JSONL files they are record keys, and a sentence field may hold either a
/// string or an array of strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSchema {
    pub name: String,
    #[serde(default)]
    pub level: Option<Level>,
    pub kind: TaskKind,
    pub format: FileFormat,
    #[serde(default)]
    pub header: bool,
    pub sentence_fields: Vec<String>,
    pub label_field: String,
    #[serde(default)]
    pub split_field: Option<String>,
    #[serde(default)]
    pub id_field: Option<String>,
    /// Full ordered label set, when some labels may be absent from the file.
    #[serde(default)]
    pub labels: Option<Vec<String>>,
}

impl TaskSchema {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| TaskError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let schema: TaskSchema = toml::from_str(&text).map_err(|e| TaskError::Schema {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if schema.sentence_fields.is_empty() {
            return Err(TaskError::Schema {
                path: path.to_path_buf(),
                message: "sentence_fields is empty".into(),
            });
        }
        Ok(schema)
    }

    pub fn resolved_level(&self) -> Result<Level> {
        self.level
            .or_else(|| Level::for_task(&self.name))
            .ok_or_else(|| TaskError::UnknownLevel(self.name.clone()))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TaskError + '_ {
    move |source| TaskError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Loads a classification task. Row numbers in errors are 1-based line numbers.
pub fn load_classification_task(path: &Path, schema: &TaskSchema) -> Result<ProbingTask> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let examples = match schema.format {
        FileFormat::Tsv => parse_tsv(&text, schema, path)?,
        FileFormat::Jsonl => parse_jsonl(&text, schema)?,
    };
    ProbingTask::new(
        schema.name.clone(),
        schema.resolved_level()?,
        schema.kind,
        examples,
        schema.labels.clone(),
    )
}

fn parse_tsv(text: &str, schema: &TaskSchema, path: &Path) -> Result<Vec<Example>> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let column_of: HashMap<String, usize> = if schema.header {
        match lines.next() {
            Some((_, header)) => header
                .split('\t')
                .enumerate()
                .map(|(i, name)| (name.trim().to_string(), i))
                .collect(),
            None => HashMap::new(),
        }
    } else {
        HashMap::new()
    };
    let resolve = |field: &str| -> Result<usize> {
        if schema.header {
            column_of.get(field).copied()
        } else {
            field.parse().ok()
        }
        .ok_or_else(|| TaskError::Schema {
            path: path.to_path_buf(),
            message: format!("field `{field}` does not name a column"),
        })
    };
    let sentence_cols = schema
        .sentence_fields
        .iter()
        .map(|f| resolve(f))
        .collect::<Result<Vec<_>>>()?;
    let label_col = resolve(&schema.label_field)?;
    let split_col = schema.split_field.as_deref().map(resolve).transpose()?;
    let id_col = schema.id_field.as_deref().map(resolve).transpose()?;
    let needed = sentence_cols
        .iter()
        .chain([&label_col])
        .chain(split_col.iter())
        .chain(id_col.iter())
        .max()
        .map_or(0, |m| m + 1);

    let mut examples = Vec::new();
    for (line_no, line) in lines {
        let row = line_no + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < needed {
            return Err(TaskError::FieldCount {
                row,
                expected: needed,
                found: fields.len(),
            });
        }
        let label = fields[label_col].trim();
        if label.is_empty() {
            return Err(TaskError::EmptyLabel { row });
        }
        let mut sentences = Vec::with_capacity(sentence_cols.len());
        for (&col, field) in sentence_cols.iter().zip(&schema.sentence_fields) {
            let s = fields[col].trim();
            if s.is_empty() {
                return Err(TaskError::EmptySentence {
                    row,
                    field: field.clone(),
                });
            }
            sentences.push(s.to_string());
        }
        let split = split_col
            .map(|c| {
                SplitName::parse_tag(fields[c])
                    .ok_or_else(|| TaskError::UnknownSplitTag(fields[c].to_string()))
            })
            .transpose()?;
        let id = match id_col {
            Some(c) => fields[c].trim().to_string(),
            None => format!("r{row}"),
        };
        examples.push(Example {
            id,
            sentences,
            label: label.to_string(),
            split,
        });
    }
    Ok(examples)
}

fn json_text(value: &serde_json::Value) -> Option<String> {
    match value {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        serde_json::Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn parse_jsonl(text: &str, schema: &TaskSchema) -> Result<Vec<Example>> {
    let mut examples = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line_no + 1;
        let record: serde_json::Map<String, serde_json::Value> = serde_json::from_str(line)
            .map_err(|e| TaskError::Malformed {
                row,
                message: e.to_string(),
            })?;
        let get = |field: &str| {
            record.get(field).ok_or_else(|| TaskError::MissingField {
                row,
                field: field.to_string(),
            })
        };
        let label = json_text(get(&schema.label_field)?).unwrap_or_default();
        if label.trim().is_empty() {
            return Err(TaskError::EmptyLabel { row });
        }
        let mut sentences = Vec::new();
        for field in &schema.sentence_fields {
            let value = get(field)?;
            let parts: Vec<String> = match value {
                serde_json::Value::Array(items) => items
                    .iter()
                    .map(|v| json_text(v).unwrap_or_default())
                    .collect(),
                other => vec![json_text(other).unwrap_or_default()],
            };
            for s in parts {
                let s = s.trim();
                if s.is_empty() {
                    return Err(TaskError::EmptySentence {
                        row,
                        field: field.clone(),
                    });
                }
                sentences.push(s.to_string());
            }
        }
        let split = match &schema.split_field {
            Some(f) => {
                let tag = json_text(get(f)?).unwrap_or_default();
                Some(SplitName::parse_tag(&tag).ok_or(TaskError::UnknownSplitTag(tag))?)
            }
            None => None,
        };
        let id = match &schema.id_field {
            Some(f) => json_text(get(f)?).unwrap_or_default(),
            None => format!("r{row}"),
        };
        examples.push(Example {
            id,
            sentences,
            label: label.trim().to_string(),
            split,
        });
    }
    Ok(examples)
}

/// Writes `task` as JSONL records matching [`TaskSchema::jsonl_for`], so that
/// loading the file back yields the same examples and label set.
pub fn write_jsonl(task: &ProbingTask, path: &Path) -> Result<()> {
    let mut out = String::new();
    for ex in task.examples() {
        let mut record = serde_json::Map::new();
        record.insert("id".into(), ex.id.clone().into());
        record.insert("sentences".into(), ex.sentences.clone().into());
        record.insert("label".into(), ex.label.clone().into());
        if let Some(split) = ex.split {
            record.insert("split".into(), split.as_str().into());
        }
        out.push_str(&serde_json::Value::Object(record).to_string());
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

impl TaskSchema {
    /// Schema describing files produced by [`write_jsonl`].
    pub fn jsonl_for(task: &ProbingTask) -> TaskSchema {
        TaskSchema {
            name: task.name().to_string(),
            level: Some(task.level()),
            kind: task.kind(),
            format: FileFormat::Jsonl,
            header: false,
            sentence_fields: vec!["sentences".into()],
            label_field: "label".into(),
            split_field: task
                .examples()
                .iter()
                .all(|e| e.split.is_some())
                .then(|| "split".to_string())
                .filter(|_| !task.is_empty()),
            id_field: Some("id".into()),
            labels: Some(task.label_set().to_vec()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinimalPair {
    pub pair_id: String,
    pub good: String,
    pub bad: String,
}

impl MinimalPair {
    /// Record id of the acceptable sentence in score maps and caches.
    pub fn good_id(&self) -> String {
        format!("{}#good", self.pair_id)
    }

    pub fn bad_id(&self) -> String {
        format!("{}#bad", self.pair_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimalPairTask {
    pub name: String,
    pub level: Level,
    pub pairs: Vec<MinimalPair>,
    /// Non-fatal observations made while loading (e.g. an empty file).
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl MinimalPairTask {
    pub fn new(name: impl Into<String>, level: Level, pairs: Vec<MinimalPair>) -> Result<Self> {
        let mut ids = HashSet::new();
        for p in &pairs {
            if p.good == p.bad {
                return Err(TaskError::IdenticalPair(p.pair_id.clone()));
            }
            if !ids.insert(p.pair_id.as_str()) {
                return Err(TaskError::DuplicatePairId(p.pair_id.clone()));
            }
        }
        let mut task = MinimalPairTask {
            name: name.into(),
            level,
            pairs,
            warnings: Vec::new(),
        };
        if task.pairs.is_empty() {
            task.warnings
                .push(format!("task `{}` has no pairs", task.name));
        }
        Ok(task)
    }
}

#[derive(Deserialize)]
struct PairRecord {
    sentence_good: String,
    sentence_bad: String,
    #[serde(default, alias = "pairID")]
    pair_id: Option<serde_json::Value>,
    #[serde(default, rename = "UID")]
    uid: Option<String>,
}

/// Loads a BLiMP-style JSONL file (`sentence_good`, `sentence_bad`, optional
/// `pair_id`/`pairID`). The task name comes from the records' `UID` field or
/// the file stem; the level from the standard task grouping.
pub fn load_minimal_pairs(path: &Path) -> Result<MinimalPairTask> {
    let (uid, pairs) = read_pairs(path)?;
    let name = uid.unwrap_or_else(|| stem_of(path));
    let level = Level::for_task(&name).ok_or_else(|| TaskError::UnknownLevel(name.clone()))?;
    MinimalPairTask::new(name, level, pairs)
}

/// Like [`load_minimal_pairs`] but with an explicit name and level, for
/// phenomena outside the standard grouping.
pub fn load_minimal_pairs_as(path: &Path, name: &str, level: Level) -> Result<MinimalPairTask> {
    let (_, pairs) = read_pairs(path)?;
    MinimalPairTask::new(name, level, pairs)
}

/// The name [`load_minimal_pairs`] would give the file.
pub fn minimal_pairs_name(path: &Path) -> Result<String> {
    Ok(read_pairs(path)?.0.unwrap_or_else(|| stem_of(path)))
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn read_pairs(path: &Path) -> Result<(Option<String>, Vec<MinimalPair>)> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut uid = None;
    let mut pairs = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line_no + 1;
        let rec: PairRecord = serde_json::from_str(line).map_err(|e| TaskError::Malformed {
            row,
            message: e.to_string(),
        })?;
        if uid.is_none() {
            uid = rec.uid;
        }
        let pair_id = rec
            .pair_id
            .as_ref()
            .and_then(json_text)
            .unwrap_or_else(|| format!("p{row}"));
        pairs.push(MinimalPair {
            pair_id,
            good: rec.sentence_good,
            bad: rec.sentence_bad,
        });
    }
    Ok((uid, pairs))
}

/// Disjoint train/dev/test index lists into a task's examples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn get(&self, name: SplitName) -> &[usize] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Dev => &self.dev,
            SplitName::Test => &self.test,
        }
    }

    /// Split given by the dataset's own tags, when every example carries one.
    pub fn from_tags(task: &ProbingTask) -> Option<Split> {
        if task.is_empty() {
            return None;
        }
        let mut split = Split {
            train: Vec::new(),
            dev: Vec::new(),
            test: Vec::new(),
        };
        for (i, ex) in task.examples().iter().enumerate() {
            match ex.split? {
                SplitName::Train => split.train.push(i),
                SplitName::Dev => split.dev.push(i),
                SplitName::Test => split.test.push(i),
            }
        }
        Some(split)
    }
}

pub const DEFAULT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

/// Deterministic seeded train/dev/test split.
///
/// Split sizes are fixed globally (dev and test get `round(n * ratio)`, at
/// least one each; train takes the rest). When every class has at least three
/// examples the permutation is stratified: each class is shuffled on its own
/// and the classes are interleaved by relative position, so every contiguous
/// block of the ordering carries close to the overall class mix.
pub fn split_dataset(task: &ProbingTask, ratios: [f64; 3], seed: u64) -> Result<Split> {
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0))
        || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(TaskError::BadRatios(ratios));
    }
    let n = task.len();
    let n_labels = task.label_set().len();
    if n < 3 || n < n_labels {
        return Err(TaskError::TooFewExamples {
            n,
            labels: n_labels,
        });
    }
    let n_dev = ((n as f64 * ratios[1]).round() as usize).max(1);
    let n_test = ((n as f64 * ratios[2]).round() as usize).max(1);
    if n_dev + n_test >= n {
        return Err(TaskError::TooFewExamples {
            n,
            labels: n_labels,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hist = class_distribution(task);
    let stratify = hist.values().all(|&c| c >= 3) && hist.len() == n_labels;
    let order: Vec<usize> = if stratify {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_labels];
        for (i, ex) in task.examples().iter().enumerate() {
            by_class[task.label_index(&ex.label).expect("validated label")].push(i);
        }
        let mut keyed = Vec::with_capacity(n);
        for (class, members) in by_class.iter_mut().enumerate() {
            members.shuffle(&mut rng);
            let len = members.len() as f64;
            for (rank, &idx) in members.iter().enumerate() {
                keyed.push(((rank as f64 + 0.5) / len, class, idx));
            }
        }
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        keyed.into_iter().map(|(_, _, idx)| idx).collect()
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx
    };

    // test and dev are drawn as evenly spaced blocks through the ordering so
    // stratification survives the cut
    let test = order[..n_test].to_vec();
    let dev = order[n_test..n_test + n_dev].to_vec();
    let train = order[n_test + n_dev..].to_vec();
    Ok(Split { train, dev, test })
}

/// Control transformation: the same examples with labels permuted by a seeded
/// uniform permutation. The label multiset is unchanged.
pub fn shuffle_labels(task: &ProbingTask, seed: u64) -> ProbingTask {
    let mut labels: Vec<String> = task.examples().iter().map(|e| e.label.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labels.shuffle(&mut rng);
    let mut out = task.clone();
    for (ex, label) in out.examples.iter_mut().zip(labels) {
        ex.label = label;
    }
    out.control = true;
    out
}

/// Per-label example counts keyed by label; labels with no examples are left
/// out.
pub fn class_distribution(task: &ProbingTask) -> BTreeMap<String, usize> {
    let mut hist = BTreeMap::new();
    for label in task.labels() {
        *hist.entry(label.to_string()).or_insert(0) += 1;
    }
    hist
}

/// Counts paired with the task's label order, including zero counts.
pub fn ordered_distribution(task: &ProbingTask) -> Vec<(String, usize)> {
    let hist = class_distribution(task);
    task.label_set()
        .iter()
        .map(|l| (l.clone(), hist.get(l).copied().unwrap_or(0)))
        .collect()
}
