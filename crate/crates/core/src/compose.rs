//! Feature composition: token embeddings to probe inputs.
//!
//! Three schemes, selected by task kind:
//! - single sentences are mean-pooled over content tokens;
//! - sentence pairs are the concatenation of the two pooled vectors;
//! - sentence sequences are `e1` followed by `e1 - ek` for every later `k`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedcache::{sentence_record_id, CacheKey, CacheRecord};
use crate::taskset::{ProbingTask, TaskKind};

#[derive(Debug, Error, PartialEq)]
pub enum ComposeError {
    #[error("no content tokens to pool")]
    NoContentTokens,
    #[error("mask has {mask} entries for {tokens} tokens")]
    MaskLength { mask: usize, tokens: usize },
    #[error("positional features need at least 2 sentence embeddings, got {0}")]
    TooFewSentences(usize),
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("example `{example_id}`: no cache record `{record_id}`")]
    MissingRecord {
        example_id: String,
        record_id: String,
    },
    #[error("example `{example_id}`: {source}")]
    Example {
        example_id: String,
        #[source]
        source: Box<ComposeError>,
    },
    #[error("method {method:?} does not apply to {kind:?} tasks")]
    MethodKind { method: Method, kind: TaskKind },
    #[error("example `{0}` produced a non-finite feature")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, ComposeError>;

/// Arithmetic mean of the rows of a `tokens x dim` row-major matrix where
/// `content_mask` is true. Accumulates in f64.
pub fn mean_pool(data: &[f32], dim: usize, content_mask: &[bool]) -> Result<Vec<f64>> {
    let tokens = if dim == 0 { 0 } else { data.len() / dim };
    if content_mask.len() != tokens {
        return Err(ComposeError::MaskLength {
            mask: content_mask.len(),
            tokens,
        });
    }
    let mut sum = vec![0.0f64; dim];
    let mut count = 0usize;
    for (row, &keep) in data.chunks_exact(dim.max(1)).zip(content_mask) {
        if keep {
            for (s, &v) in sum.iter_mut().zip(row) {
                *s += v as f64;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(ComposeError::NoContentTokens);
    }
    let n = count as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    Ok(sum)
}

fn pooled(record: &CacheRecord) -> Result<Vec<f64>> {
    mean_pool(record.matrix.data(), record.matrix.dim(), &record.mask())
}

/// `concat(e1, e1 - e2, ..., e1 - ek)`.
pub fn positional_features(embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
    if embeddings.len() < 2 {
        return Err(ComposeError::TooFewSentences(embeddings.len()));
    }
    let first = &embeddings[0];
    let d = first.len();
    let mut out = Vec::with_capacity(d * embeddings.len());
    out.extend_from_slice(first);
    for e in &embeddings[1..] {
        if e.len() != d {
            return Err(ComposeError::DimMismatch(d, e.len()));
        }
        out.extend(first.iter().zip(e).map(|(a, b)| a - b));
    }
    Ok(out)
}

/// `[a ; b]` in argument order.
pub fn pair_concat(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(ComposeError::DimMismatch(a.len(), b.len()));
    }
    let mut out = Vec::with_capacity(a.len() * 2);
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    MeanPool,
    Positional,
    PairConcat,
}

impl Method {
    pub fn for_kind(kind: TaskKind) -> Method {
        match kind {
            TaskKind::SingleSentence => Method::MeanPool,
            TaskKind::SentencePair => Method::PairConcat,
            TaskKind::SentenceSequence => Method::Positional,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::MeanPool => "mean_pool",
            Method::Positional => "positional",
            Method::PairConcat => "pair_concat",
        }
    }
}

/// Dense `n x d` f32 matrix of probe inputs, one row per example.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f32>,
    pub example_ids: Vec<String>,
    pub method: Method,
    pub source: Option<CacheKey>,
}

impl FeatureMatrix {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    /// Zero-mean, unit-variance columns (constant columns are only centered).
    /// Diagnostics only; probes run on raw features by default.
    pub fn standardize(&mut self) {
        if self.n == 0 {
            return;
        }
        for j in 0..self.d {
            let col = (0..self.n).map(|i| self.data[i * self.d + j] as f64);
            let mean = col.clone().sum::<f64>() / self.n as f64;
            let var = col.map(|v| (v - mean).powi(2)).sum::<f64>() / self.n as f64;
            let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
            for i in 0..self.n {
                let v = &mut self.data[i * self.d + j];
                *v = ((*v as f64 - mean) / scale) as f32;
            }
        }
    }
}

/// Cache records indexed by record id.
pub type RecordIndex<'a> = HashMap<&'a str, &'a CacheRecord>;

pub fn index_records(records: &[CacheRecord]) -> RecordIndex<'_> {
    records.iter().map(|r| (r.example_id.as_str(), r)).collect()
}

/// Builds one feature row per example in `indices` (task order restricted to
/// the split). Sentence `k` of example `id` is looked up as record `id#k`.
pub fn build_features(
    task: &ProbingTask,
    indices: &[usize],
    records: &RecordIndex<'_>,
    method: Method,
) -> Result<FeatureMatrix> {
    let kind = task.kind();
    let fits = matches!(
        (method, kind),
        (Method::MeanPool, TaskKind::SingleSentence)
            | (Method::PairConcat, TaskKind::SentencePair)
            | (Method::Positional, TaskKind::SentenceSequence)
    );
    if !fits {
        return Err(ComposeError::MethodKind { method, kind });
    }
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(indices.len());
    let mut ids = Vec::with_capacity(indices.len());
    for &i in indices {
        let ex = &task.examples()[i];
        let wrap = |source: ComposeError| match source {
            e @ ComposeError::MissingRecord { .. } => e,
            other => ComposeError::Example {
                example_id: ex.id.clone(),
                source: Box::new(other),
            },
        };
        let mut sentence_vecs = Vec::with_capacity(ex.sentences.len());
        for k in 0..ex.sentences.len() {
            let rid = sentence_record_id(&ex.id, k);
            let rec = records
                .get(rid.as_str())
                .ok_or_else(|| ComposeError::MissingRecord {
                    example_id: ex.id.clone(),
                    record_id: rid.clone(),
                })?;
            sentence_vecs.push(pooled(rec).map_err(wrap)?);
        }
        let row = match method {
            Method::MeanPool => sentence_vecs.swap_remove(0),
            Method::PairConcat => {
                pair_concat(&sentence_vecs[0], &sentence_vecs[1]).map_err(wrap)?
            }
            Method::Positional => positional_features(&sentence_vecs).map_err(wrap)?,
        };
        if let Some(prev) = rows.first() {
            if prev.len() != row.len() {
                return Err(wrap(ComposeError::DimMismatch(prev.len(), row.len())));
            }
        }
        if row.iter().any(|v| !(*v as f32).is_finite()) {
            return Err(ComposeError::NonFinite(ex.id.clone()));
        }
        rows.push(row);
        ids.push(ex.id.clone());
    }
    let d = rows.first().map_or(0, Vec::len);
    Ok(FeatureMatrix {
        n: rows.len(),
        d,
        data: rows.into_iter().flatten().map(|v| v as f32).collect(),
        example_ids: ids,
        method,
        source: None,
    })
}
