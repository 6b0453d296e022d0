//! Minimal-pair acceptability from per-position masked log-probabilities.
//!
//! A sentence's score is its pseudo-log-likelihood: the sum over positions of
//! the log-probability of the true token with that position masked. A pair is
//! judged correct when the acceptable sentence scores strictly higher.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedcache::CacheRecord;
use crate::taskset::MinimalPairTask;

#[derive(Debug, Error, PartialEq)]
pub enum ScoreError {
    #[error("no positions to score")]
    Empty,
    #[error("position {index}: {value} is not a log-probability")]
    NotALogProb { index: usize, value: f64 },
    #[error("pair `{pair_id}`: no score for `{missing}`")]
    MissingScore { pair_id: String, missing: String },
    #[error("record `{0}` is not a per-position column (dim must be 1)")]
    NotAColumn(String),
    #[error("task has no pairs")]
    NoPairs,
}

pub type Result<T> = std::result::Result<T, ScoreError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceScore {
    pub example_id: String,
    /// Sum of per-position log-probabilities.
    pub pll: f64,
    pub token_count: usize,
}

impl SentenceScore {
    /// PLL divided by token count; off by default in [`ScoringOptions`].
    pub fn per_token(&self) -> f64 {
        self.pll / self.token_count as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ScoringOptions {
    pub length_normalize: bool,
}

/// Scores one sentence from its per-position log-probabilities.
pub fn pll_score(
    example_id: impl Into<String>,
    position_logprobs: &[f64],
) -> Result<SentenceScore> {
    if position_logprobs.is_empty() {
        return Err(ScoreError::Empty);
    }
    if let Some((index, &value)) = position_logprobs
        .iter()
        .enumerate()
        .find(|(_, v)| !(v.is_finite() && **v <= 0.0))
    {
        return Err(ScoreError::NotALogProb { index, value });
    }
    Ok(SentenceScore {
        example_id: example_id.into(),
        pll: position_logprobs.iter().sum(),
        token_count: position_logprobs.len(),
    })
}

/// Strictly greater wins; exact ties are judged incorrect.
pub fn judge_pair(good: &SentenceScore, bad: &SentenceScore) -> bool {
    good.pll > bad.pll
}

fn judge_with(good: &SentenceScore, bad: &SentenceScore, opts: ScoringOptions) -> bool {
    if opts.length_normalize {
        good.per_token() > bad.per_token()
    } else {
        judge_pair(good, bad)
    }
}

/// Per-pair verdicts in task order.
pub fn judge_all(
    task: &MinimalPairTask,
    scores: &HashMap<String, SentenceScore>,
    opts: ScoringOptions,
) -> Result<Vec<bool>> {
    task.pairs
        .iter()
        .map(|p| {
            let lookup = |id: String| {
                scores.get(&id).ok_or_else(|| ScoreError::MissingScore {
                    pair_id: p.pair_id.clone(),
                    missing: id,
                })
            };
            let good = lookup(p.good_id())?;
            let bad = lookup(p.bad_id())?;
            Ok(judge_with(good, bad, opts))
        })
        .collect()
}

/// Fraction of pairs judged correct.
pub fn task_accuracy(
    task: &MinimalPairTask,
    scores: &HashMap<String, SentenceScore>,
) -> Result<f64> {
    task_accuracy_with(task, scores, ScoringOptions::default())
}

pub fn task_accuracy_with(
    task: &MinimalPairTask,
    scores: &HashMap<String, SentenceScore>,
    opts: ScoringOptions,
) -> Result<f64> {
    if task.pairs.is_empty() {
        return Err(ScoreError::NoPairs);
    }
    let verdicts = judge_all(task, scores, opts)?;
    Ok(verdicts.iter().filter(|&&v| v).count() as f64 / verdicts.len() as f64)
}

/// Scores every dim-1 record of a masked-logprob cache file.
pub fn scores_from_records(records: &[CacheRecord]) -> Result<HashMap<String, SentenceScore>> {
    records
        .iter()
        .map(|r| {
            if r.matrix.dim() != 1 {
                return Err(ScoreError::NotAColumn(r.example_id.clone()));
            }
            let values: Vec<f64> = r.matrix.data().iter().map(|&v| v as f64).collect();
            pll_score(r.example_id.clone(), &values).map(|s| (r.example_id.clone(), s))
        })
        .collect()
}
