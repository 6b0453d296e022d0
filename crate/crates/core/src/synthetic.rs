//! Desk-scale fixtures with a known learning curve.
//!
//! [`write_chronology`] lays out a task file, its schema, one embedding cache
//! per synthetic checkpoint and a run config. Token embeddings at checkpoint
//! `t` are `alpha_t * mu_label + noise`, where the noise is drawn once per
//! (example, token) and reused at every checkpoint, so checkpoints with equal
//! `alpha` produce identical features and identical probe accuracy.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::embedcache::{
    sentence_record_id, write_cache, CacheError, CacheKey, CacheRecord, PayloadKind, TokenMatrix,
};

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("steps and alphas differ in length ({0} vs {1})")]
    Shape(usize, usize),
    #[error("class weights must be positive, at least two")]
    Weights,
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChronologySpec {
    pub model_id: String,
    pub batch_size: u64,
    pub task_name: String,
    /// Level name written into the schema.
    pub level: String,
    pub n_examples: usize,
    pub dim: usize,
    pub tokens: usize,
    /// Relative class frequencies; labels are `c0`, `c1`, ...
    pub class_weights: Vec<f64>,
    /// Class-mean norm before scaling by alpha.
    pub signal: f64,
    pub steps: Vec<u64>,
    pub alphas: Vec<f64>,
    pub seed: u64,
    pub control_seeds: Vec<u64>,
}

impl Default for ChronologySpec {
    fn default() -> Self {
        ChronologySpec {
            model_id: "synthetic-bert".into(),
            batch_size: 256,
            task_name: "synthetic_number".into(),
            level: "morphology".into(),
            n_examples: 2000,
            dim: 8,
            tokens: 4,
            class_weights: vec![1.0, 1.0],
            signal: 1.0,
            steps: vec![0, 100_000, 200_000, 300_000, 400_000, 500_000],
            alphas: vec![0.0, 0.3, 0.6, 1.0, 1.0, 1.0],
            seed: 7,
            control_seeds: vec![1],
        }
    }
}

impl ChronologySpec {
    /// First step from which alpha no longer changes.
    pub fn expected_stabilization(&self) -> Option<u64> {
        let last = *self.alphas.last()?;
        let i = self
            .alphas
            .iter()
            .rposition(|&a| a != last)
            .map_or(0, |i| i + 1);
        self.steps.get(i).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChronologyFixture {
    pub config_path: PathBuf,
    pub cache_root: PathBuf,
    pub output_dir: PathBuf,
    pub data_path: PathBuf,
    pub schema_path: PathBuf,
    pub labels: Vec<String>,
}

fn sample_label(rng: &mut ChaCha8Rng, cumulative: &[f64]) -> usize {
    let u: f64 = rng.random::<f64>() * cumulative.last().unwrap();
    cumulative
        .iter()
        .position(|&c| u < c)
        .unwrap_or(cumulative.len() - 1)
}

/// Writes the fixture under `dir` (which must not already contain caches).
pub fn write_chronology(
    dir: &Path,
    spec: &ChronologySpec,
) -> Result<ChronologyFixture, FixtureError> {
    if spec.steps.len() != spec.alphas.len() {
        return Err(FixtureError::Shape(spec.steps.len(), spec.alphas.len()));
    }
    if spec.class_weights.len() < 2 || spec.class_weights.iter().any(|w| !(*w > 0.0)) {
        return Err(FixtureError::Weights);
    }
    fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let classes = spec.class_weights.len();
    let labels: Vec<String> = (0..classes).map(|c| format!("c{c}")).collect();

    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..spec.dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm * spec.signal).collect()
        })
        .collect();
    let mut cumulative = Vec::with_capacity(classes);
    let mut acc = 0.0;
    for w in &spec.class_weights {
        acc += w;
        cumulative.push(acc);
    }
    let ys: Vec<usize> = (0..spec.n_examples)
        .map(|_| sample_label(&mut rng, &cumulative))
        .collect();
    let noise: Vec<Vec<f64>> = (0..spec.n_examples)
        .map(|_| {
            (0..spec.tokens * spec.dim)
                .map(|_| rng.sample(StandardNormal))
                .collect()
        })
        .collect();

    let mut tsv = String::from("id\tsentence\tlabel\n");
    for (i, &y) in ys.iter().enumerate() {
        tsv.push_str(&format!("ex{i}\tsynthetic sentence {i}\t{}\n", labels[y]));
    }
    let data_path = dir.join("task.tsv");
    fs::write(&data_path, tsv)?;
    let schema_path = dir.join("task.toml");
    let label_list: Vec<String> = labels.iter().map(|l| format!("\"{l}\"")).collect();
    fs::write(
        &schema_path,
        format!(
            "name = \"{}\"\nlevel = \"{}\"\nkind = \"single_sentence\"\nformat = \"tsv\"\nheader = true\nsentence_fields = [\"sentence\"]\nlabel_field = \"label\"\nid_field = \"id\"\nlabels = [{}]\n",
            spec.task_name,
            spec.level,
            label_list.join(", ")
        ),
    )?;

    let cache_root = dir.join("cache");
    for (&step, &alpha) in spec.steps.iter().zip(&spec.alphas) {
        let records: Vec<CacheRecord> = ys
            .iter()
            .zip(&noise)
            .enumerate()
            .map(|(i, (&y, n))| {
                let data: Vec<f32> = n
                    .iter()
                    .enumerate()
                    .map(|(j, e)| (alpha * means[y][j % spec.dim] + e) as f32)
                    .collect();
                CacheRecord::new(
                    sentence_record_id(&format!("ex{i}"), 0),
                    TokenMatrix::new(spec.tokens, spec.dim, data),
                )
            })
            .collect();
        let key = CacheKey::new(
            spec.model_id.clone(),
            step,
            spec.task_name.clone(),
            "all",
            PayloadKind::TokenEmbeddings,
        );
        write_cache(&cache_root, &key, &records)?;
    }

    let steps: Vec<String> = spec.steps.iter().map(u64::to_string).collect();
    let seeds: Vec<String> = spec.control_seeds.iter().map(u64::to_string).collect();
    let config = format!(
        r#"cache_root = "cache"
output_dir = "out"
seed = {seed}
control_seeds = [{seeds}]

[[models]]
model_id = "{model}"
batch_size = {batch}
checkpoint_steps = [{steps}]

[[tasks]]
type = "classification"
schema = "task.toml"
data = "task.tsv"
"#,
        seed = spec.seed,
        seeds = seeds.join(", "),
        model = spec.model_id,
        batch = spec.batch_size,
        steps = steps.join(", "),
    );
    let config_path = dir.join("run.toml");
    fs::write(&config_path, config)?;
    Ok(ChronologyFixture {
        config_path,
        cache_root,
        output_dir: dir.join("out"),
        data_path,
        schema_path,
        labels,
    })
}
