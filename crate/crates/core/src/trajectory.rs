//! Learning trajectories: per-checkpoint accuracy series with stabilization
//! detection, sentences-seen conversion and reference/baseline comparison.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taskset::Level;

/// Default half-width of the tube around the final accuracy.
pub const DEFAULT_EPSILON: f64 = 0.02;
/// A final accuracy within this distance of the control baseline is flagged.
pub const AT_BASELINE_TOLERANCE: f64 = 0.02;
/// Optimizer steps per plotted "iteration" unit.
pub const STEPS_PER_UNIT: u64 = 100_000;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("duplicate checkpoint step {0}")]
    DuplicateStep(u64),
    #[error("empty trajectory")]
    Empty,
    #[error("accuracy {0} outside [0, 1]")]
    AccuracyRange(f64),
    #[error("epsilon must be > 0, got {0}")]
    BadEpsilon(f64),
    #[error("trajectory record line {line}: {message}")]
    Record { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrajectoryError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointKind {
    Real,
    Control,
}

impl PointKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PointKind::Real => "real",
            PointKind::Control => "control",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    #[default]
    EncoderOnly,
    EncoderDecoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub model_id: String,
    /// Sentences per optimizer step.
    pub batch_size: u64,
    pub checkpoint_steps: Vec<u64>,
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default = "default_steps_per_unit")]
    pub steps_per_unit: u64,
}

fn default_steps_per_unit() -> u64 {
    STEPS_PER_UNIT
}

impl ModelProfile {
    /// Encoder-only profile, batch 256.
    pub fn multibert(checkpoint_steps: Vec<u64>) -> Self {
        ModelProfile {
            model_id: "multibert-seed0".into(),
            batch_size: 256,
            checkpoint_steps,
            architecture: Architecture::EncoderOnly,
            steps_per_unit: STEPS_PER_UNIT,
        }
    }

    /// Encoder-decoder profile, batch 32.
    pub fn t5_small(checkpoint_steps: Vec<u64>) -> Self {
        ModelProfile {
            model_id: "t5-small".into(),
            batch_size: 32,
            checkpoint_steps,
            architecture: Architecture::EncoderDecoder,
            steps_per_unit: STEPS_PER_UNIT,
        }
    }

    pub fn sentences_per_unit(&self) -> u64 {
        self.steps_per_unit * self.batch_size
    }
}

/// `step_units` plotted iterations converted to sentences seen.
pub fn iterations_to_sentences(step_units: u64, profile: &ModelProfile) -> u64 {
    step_units * profile.sentences_per_unit()
}

/// Raw optimizer steps converted to sentences seen.
pub fn steps_to_sentences(steps: u64, profile: &ModelProfile) -> u64 {
    steps * profile.batch_size
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: u64,
    pub accuracy: f64,
}

/// One accuracy series, real or control, for a task. Points are sorted
/// strictly by step; nothing is interpolated between checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub model_id: String,
    pub task_name: String,
    pub level: Level,
    pub kind: PointKind,
    pub points: Vec<TrajectoryPoint>,
    pub reference_accuracy: Option<f64>,
    pub baseline_accuracy: Option<f64>,
    /// Set when there were no results to assemble.
    pub incomplete: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskMeta {
    pub model_id: String,
    pub task_name: String,
    pub level: Level,
    pub kind: PointKind,
}

fn check_accuracy(a: f64) -> Result<()> {
    if (0.0..=1.0).contains(&a) {
        Ok(())
    } else {
        Err(TrajectoryError::AccuracyRange(a))
    }
}

/// Sorts `(step, accuracy)` results into a trajectory.
pub fn assemble(results: &[(u64, f64)], meta: &TaskMeta) -> Result<Trajectory> {
    let mut points: Vec<TrajectoryPoint> = results
        .iter()
        .map(|&(step, accuracy)| TrajectoryPoint { step, accuracy })
        .collect();
    for p in &points {
        check_accuracy(p.accuracy)?;
    }
    points.sort_by_key(|p| p.step);
    if let Some(w) = points.windows(2).find(|w| w[0].step == w[1].step) {
        return Err(TrajectoryError::DuplicateStep(w[0].step));
    }
    Ok(Trajectory {
        model_id: meta.model_id.clone(),
        task_name: meta.task_name.clone(),
        level: meta.level,
        kind: meta.kind,
        incomplete: points.is_empty(),
        points,
        reference_accuracy: None,
        baseline_accuracy: None,
    })
}

impl Trajectory {
    pub fn final_point(&self) -> Option<&TrajectoryPoint> {
        self.points.last()
    }
}

/// Smallest step `s` such that every point at or after `s` lies within
/// `epsilon` of the final accuracy. Always defined for a non-empty series; a
/// series that only settles at its last point returns the last step.
pub fn stabilization_point(traj: &Trajectory, epsilon: f64) -> Result<u64> {
    if !(epsilon > 0.0) {
        return Err(TrajectoryError::BadEpsilon(epsilon));
    }
    let last = traj.points.last().ok_or(TrajectoryError::Empty)?;
    let mut stable = last.step;
    for p in traj.points.iter().rev() {
        if (p.accuracy - last.accuracy).abs() > epsilon {
            break;
        }
        stable = p.step;
    }
    Ok(stable)
}

/// Like [`stabilization_point`] but `None` when only the final point
/// qualifies, i.e. the series never settled within the observed window.
pub fn settled_before_end(traj: &Trajectory, epsilon: f64) -> Result<Option<u64>> {
    let step = stabilization_point(traj, epsilon)?;
    let last = traj.points.last().map(|p| p.step);
    Ok((traj.points.len() > 1 && Some(step) != last).then_some(step))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointDelta {
    pub step: u64,
    pub accuracy: f64,
    pub vs_reference: Option<f64>,
    pub vs_baseline: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub deltas: Vec<PointDelta>,
    pub final_accuracy: Option<f64>,
    /// `None` when no baseline was supplied.
    pub at_baseline: Option<bool>,
}

/// Per-point deltas against the reference and baseline accuracies, plus the
/// at-baseline flag for the final point.
pub fn compare_to_reference(
    traj: &Trajectory,
    reference_accuracy: Option<f64>,
    baseline_accuracy: Option<f64>,
) -> Result<ComparisonReport> {
    for a in reference_accuracy.iter().chain(baseline_accuracy.iter()) {
        check_accuracy(*a)?;
    }
    let deltas = traj
        .points
        .iter()
        .map(|p| PointDelta {
            step: p.step,
            accuracy: p.accuracy,
            vs_reference: reference_accuracy.map(|r| p.accuracy - r),
            vs_baseline: baseline_accuracy.map(|b| p.accuracy - b),
        })
        .collect();
    let final_accuracy = traj.final_point().map(|p| p.accuracy);
    let at_baseline = match (final_accuracy, baseline_accuracy) {
        (Some(f), Some(b)) => Some(is_at_baseline(f, b)),
        _ => None,
    };
    Ok(ComparisonReport {
        deltas,
        final_accuracy,
        at_baseline,
    })
}

pub fn is_at_baseline(accuracy: f64, baseline: f64) -> bool {
    // slack absorbs decimal inputs like 0.52 - 0.50
    (accuracy - baseline).abs() <= AT_BASELINE_TOLERANCE + 1e-12
}

/// One line of the trajectory record file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub model: String,
    pub task: String,
    pub level: Level,
    pub step: u64,
    pub sentences_seen: u64,
    pub accuracy: f64,
    pub kind: PointKind,
    pub probe_config_hash: String,
}

impl Trajectory {
    pub fn to_records(
        &self,
        profile: &ModelProfile,
        probe_config_hash: &str,
    ) -> Vec<TrajectoryRecord> {
        self.points
            .iter()
            .map(|p| TrajectoryRecord {
                model: self.model_id.clone(),
                task: self.task_name.clone(),
                level: self.level,
                step: p.step,
                sentences_seen: steps_to_sentences(p.step, profile),
                accuracy: p.accuracy,
                kind: self.kind,
                probe_config_hash: probe_config_hash.to_string(),
            })
            .collect()
    }
}

/// Groups records by (model, task, kind) and assembles one trajectory each,
/// in sorted key order.
pub fn trajectories_from_records(records: &[TrajectoryRecord]) -> Result<Vec<Trajectory>> {
    let mut groups: BTreeMap<(String, String, PointKind), (Level, Vec<(u64, f64)>)> =
        BTreeMap::new();
    for r in records {
        groups
            .entry((r.model.clone(), r.task.clone(), r.kind))
            .or_insert_with(|| (r.level, Vec::new()))
            .1
            .push((r.step, r.accuracy));
    }
    groups
        .into_iter()
        .map(|((model_id, task_name, kind), (level, results))| {
            assemble(
                &results,
                &TaskMeta {
                    model_id,
                    task_name,
                    level,
                    kind,
                },
            )
        })
        .collect()
}

pub fn write_records(path: &Path, records: &[TrajectoryRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    let text = fs::read_to_string(path)?;
    parse_records(&text)
}

pub fn parse_records(text: &str) -> Result<Vec<TrajectoryRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| TrajectoryError::Record {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> TaskMeta {
        TaskMeta {
            model_id: "m".into(),
            task_name: "subj_number".into(),
            level: Level::Morphology,
            kind: PointKind::Real,
        }
    }

    fn series(accs: &[f64]) -> Trajectory {
        let results: Vec<(u64, f64)> = accs
            .iter()
            .enumerate()
            .map(|(i, &a)| (i as u64 * 100_000, a))
            .collect();
        assemble(&results, &meta()).unwrap()
    }

    #[test]
    fn assemble_sorts_and_rejects_duplicates() {
        let t = assemble(&[(200_000, 0.7), (100_000, 0.6)], &meta()).unwrap();
        assert_eq!(t.points[0].step, 100_000);
        assert_eq!(t.points[1].step, 200_000);
        assert!(matches!(
            assemble(&[(1, 0.5), (1, 0.6)], &meta()),
            Err(TrajectoryError::DuplicateStep(1))
        ));
        let empty = assemble(&[], &meta()).unwrap();
        assert!(empty.incomplete && empty.points.is_empty());
        assert!(assemble(&[(1, 1.2)], &meta()).is_err());
    }

    #[test]
    fn stabilization_examples() {
        let t = series(&[0.50, 0.80, 0.81, 0.80, 0.805]);
        assert_eq!(stabilization_point(&t, 0.02).unwrap(), 100_000);

        let ramp = series(&[0.1, 0.2, 0.3, 0.4, 0.5]);
        assert_eq!(stabilization_point(&ramp, 0.02).unwrap(), 400_000);
        assert_eq!(settled_before_end(&ramp, 0.02).unwrap(), None);

        let flat = series(&[0.7; 4]);
        assert_eq!(stabilization_point(&flat, 0.02).unwrap(), 0);
        assert_eq!(settled_before_end(&flat, 0.02).unwrap(), Some(0));

        let empty = assemble(&[], &meta()).unwrap();
        assert!(matches!(
            stabilization_point(&empty, 0.02),
            Err(TrajectoryError::Empty)
        ));
        assert!(stabilization_point(&flat, 0.0).is_err());
    }

    #[test]
    fn sentences_per_iteration() {
        let bert = ModelProfile::multibert(vec![]);
        let t5 = ModelProfile::t5_small(vec![]);
        assert_eq!(iterations_to_sentences(1, &bert), 25_600_000);
        assert_eq!(iterations_to_sentences(1, &t5), 3_200_000);
        assert_eq!(100_000 * 256, 25_600_000);
        assert_eq!(
            steps_to_sentences(100_000, &bert),
            iterations_to_sentences(1, &bert)
        );
        assert_eq!(iterations_to_sentences(0, &bert), 0);
    }

    #[test]
    fn comparison_flags() {
        let t = series(&[0.4, 0.51]);
        let r = compare_to_reference(&t, Some(0.6), Some(0.50)).unwrap();
        assert_eq!(r.at_baseline, Some(true));

        let t = series(&[0.5, 0.90]);
        let r = compare_to_reference(&t, None, Some(0.50)).unwrap();
        assert_eq!(r.at_baseline, Some(false));
        assert!((r.deltas[1].vs_baseline.unwrap() - 0.40).abs() < 1e-12);
        assert_eq!(r.deltas[1].vs_reference, None);

        let r = compare_to_reference(&t, Some(0.95), None).unwrap();
        assert_eq!(r.at_baseline, None);
        assert!(r.deltas.iter().all(|d| d.vs_baseline.is_none()));
        assert!((r.deltas[1].vs_reference.unwrap() + 0.05).abs() < 1e-12);
    }

    #[test]
    fn records_round_trip() {
        let mut t = series(&[0.5, 0.61, 0.7]);
        t.model_id = "multibert-seed0".into();
        let profile = ModelProfile::multibert(vec![0, 100_000, 200_000]);
        let recs = t.to_records(&profile, "abc");
        assert_eq!(recs[1].sentences_seen, 25_600_000);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.jsonl");
        write_records(&path, &recs).unwrap();
        let back = trajectories_from_records(&read_records(&path).unwrap()).unwrap();
        assert_eq!(back, vec![t]);
    }
}
