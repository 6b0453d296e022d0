//! Batch report artifacts: the canonical CSV accuracy table, per-model SVG
//! trajectory charts, the final/reference/baseline comparison table and the
//! class-balance summary.
//!
//! Every writer is deterministic: fixed ordering, fixed float formatting, no
//! timestamps.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taskset::Level;
use crate::trajectory::{is_at_baseline, PointKind, Trajectory};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("nothing to render")]
    Empty,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ReportError>;

/// Level colors, defaulting to orange / purple / green.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Palette {
    pub morphology: String,
    pub syntax: String,
    pub discourse: String,
}

impl Default for Palette {
    fn default() -> Self {
        Palette {
            morphology: "#ff7f0e".into(),
            syntax: "#9467bd".into(),
            discourse: "#2ca02c".into(),
        }
    }
}

impl Palette {
    pub fn color(&self, level: Level) -> &str {
        match level {
            Level::Morphology => &self.morphology,
            Level::Syntax => &self.syntax,
            Level::Discourse => &self.discourse,
        }
    }
}

const DASHES: [&str; 6] = ["", "8 4", "2 3", "10 3 2 3", "4 4", "1 5"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChartStyle {
    pub width: u32,
    pub height: u32,
    pub palette: Palette,
    pub title: String,
    /// Optimizer steps per plotted iteration unit.
    pub steps_per_unit: u64,
    /// Sentences per optimizer step; enables the secondary axis labels.
    pub batch_size: Option<u64>,
}

impl Default for ChartStyle {
    fn default() -> Self {
        ChartStyle {
            width: 960,
            height: 540,
            palette: Palette::default(),
            title: String::new(),
            steps_per_unit: crate::trajectory::STEPS_PER_UNIT,
            batch_size: None,
        }
    }
}

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// Compact count label: 25600000 -> "25.6M".
fn human_count(v: f64) -> String {
    let (scaled, suffix) = if v >= 1e12 {
        (v / 1e12, "T")
    } else if v >= 1e9 {
        (v / 1e9, "B")
    } else if v >= 1e6 {
        (v / 1e6, "M")
    } else if v >= 1e3 {
        (v / 1e3, "k")
    } else {
        (v, "")
    };
    let s = format!("{scaled:.1}");
    let s = s.strip_suffix(".0").unwrap_or(&s);
    format!("{s}{suffix}")
}

fn iteration_label(step: u64, steps_per_unit: u64) -> String {
    let units = step as f64 / steps_per_unit as f64;
    let s = format!("{units:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// One SVG line chart: a polyline per trajectory (a marker for single-point
/// series), colored by level, with distinct dash patterns for tasks sharing a
/// level.
pub fn render_trajectories(trajectories: &[Trajectory], style: &ChartStyle) -> Result<String> {
    let series: Vec<&Trajectory> = trajectories
        .iter()
        .filter(|t| !t.points.is_empty())
        .collect();
    if series.is_empty() {
        return Err(ReportError::Empty);
    }
    let (w, h) = (style.width as f64, style.height as f64);
    let (left, right, top, bottom) = (64.0, 220.0, 40.0, 72.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;

    let mut steps: Vec<u64> = series
        .iter()
        .flat_map(|t| t.points.iter().map(|p| p.step))
        .collect();
    steps.sort_unstable();
    steps.dedup();
    let (min_step, max_step) = (steps[0] as f64, *steps.last().unwrap() as f64);
    let span = if max_step > min_step {
        max_step - min_step
    } else {
        1.0
    };
    let x_of = |step: u64| {
        if max_step > min_step {
            left + (step as f64 - min_step) / span * plot_w
        } else {
            left + plot_w / 2.0
        }
    };
    let y_of = |acc: f64| top + (1.0 - acc) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<?xml version="1.0" encoding="UTF-8" standalone="no"?>"#
    );
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#
    );
    if !style.title.is_empty() {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
            left + plot_w / 2.0,
            xml_escape(&style.title)
        );
    }

    // axes and grid
    let _ = writeln!(
        svg,
        r#"<g stroke="black" stroke-width="1"><line x1="{left}" y1="{:.1}" x2="{:.1}" y2="{:.1}"/><line x1="{left}" y1="{top}" x2="{left}" y2="{:.1}"/></g>"#,
        top + plot_h,
        left + plot_w,
        top + plot_h,
        top + plot_h
    );
    for i in 0..=5 {
        let acc = i as f64 / 5.0;
        let y = y_of(acc);
        let _ = writeln!(
            svg,
            r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#dddddd" stroke-width="1"/><text x="{:.1}" y="{:.1}" text-anchor="end">{acc:.1}</text>"##,
            left + plot_w,
            left - 6.0,
            y + 4.0
        );
    }
    let ticks: Vec<u64> = if steps.len() <= 12 {
        steps.clone()
    } else {
        (0..=8)
            .map(|i| (min_step + span * i as f64 / 8.0).round() as u64)
            .collect()
    };
    for step in ticks {
        let x = x_of(step);
        let base = top + plot_h;
        let _ = writeln!(
            svg,
            r#"<line x1="{x:.1}" y1="{base:.1}" x2="{x:.1}" y2="{:.1}" stroke="black"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            base + 5.0,
            base + 18.0,
            iteration_label(step, style.steps_per_unit)
        );
        if let Some(batch) = style.batch_size {
            let _ = writeln!(
                svg,
                r##"<text x="{x:.1}" y="{:.1}" text-anchor="middle" font-size="10" fill="#555555">{}</text>"##,
                base + 32.0,
                human_count(step as f64 * batch as f64)
            );
        }
    }
    let axis_label = match style.batch_size {
        Some(_) => format!(
            "iterations (x{}) / sentences seen",
            human_count(style.steps_per_unit as f64)
        ),
        None => format!("iterations (x{})", human_count(style.steps_per_unit as f64)),
    };
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        left + plot_w / 2.0,
        h - 12.0,
        xml_escape(&axis_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">accuracy</text>"#,
        top + plot_h / 2.0,
        top + plot_h / 2.0
    );

    let mut per_level = [0usize; 3];
    for (i, t) in series.iter().enumerate() {
        let level_slot = Level::ALL.iter().position(|l| *l == t.level).unwrap();
        let dash = DASHES[per_level[level_slot] % DASHES.len()];
        per_level[level_slot] += 1;
        let color = style.palette.color(t.level);
        let dash_attr = if dash.is_empty() {
            String::new()
        } else {
            format!(r#" stroke-dasharray="{dash}""#)
        };
        let opacity = if t.kind == PointKind::Control {
            r#" stroke-opacity="0.5""#
        } else {
            ""
        };
        let name = xml_escape(&t.task_name);
        if t.points.len() == 1 {
            let p = t.points[0];
            let _ = writeln!(
                svg,
                r#"<circle class="series" data-task="{name}" cx="{:.1}" cy="{:.1}" r="4" fill="{color}"/>"#,
                x_of(p.step),
                y_of(p.accuracy)
            );
        } else {
            let pts: Vec<String> = t
                .points
                .iter()
                .map(|p| format!("{:.1},{:.1}", x_of(p.step), y_of(p.accuracy)))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline class="series" data-task="{name}" points="{}" fill="none" stroke="{color}" stroke-width="2"{dash_attr}{opacity}/>"#,
                pts.join(" ")
            );
        }
        let ly = top + 8.0 + i as f64 * 18.0;
        let lx = left + plot_w + 16.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"{dash_attr}/><text x="{:.1}" y="{:.1}">{name}</text>"#,
            lx + 28.0,
            lx + 34.0,
            ly + 4.0
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// One row of the canonical accuracy table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub model: String,
    pub task: String,
    pub level: Level,
    pub step: u64,
    pub sentences_seen: u64,
    pub kind: PointKind,
    pub accuracy: f64,
}

pub fn accuracy_csv(rows: &[AccuracyRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record([
            "model",
            "task",
            "level",
            "step",
            "sentences_seen",
            "kind",
            "accuracy",
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| ReportError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn read_accuracy_csv(path: &Path) -> Result<Vec<AccuracyRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub task: String,
    pub engine_final: Option<f64>,
    pub reference: Option<f64>,
    pub baseline: Option<f64>,
    pub at_baseline: Option<bool>,
}

/// Joins per-task final, reference and baseline accuracies. Tasks missing from
/// some list keep blanks; row order is first appearance across the lists.
pub fn render_comparison(
    finals: &[(String, f64)],
    reference: &[(String, f64)],
    baseline: &[(String, f64)],
) -> Vec<ComparisonRow> {
    let mut tasks: Vec<&str> = Vec::new();
    for (t, _) in finals.iter().chain(reference).chain(baseline) {
        if !tasks.contains(&t.as_str()) {
            tasks.push(t);
        }
    }
    let find =
        |list: &[(String, f64)], task: &str| list.iter().find(|(t, _)| t == task).map(|(_, v)| *v);
    tasks
        .into_iter()
        .map(|task| {
            let engine_final = find(finals, task);
            let baseline = find(baseline, task);
            ComparisonRow {
                task: task.to_string(),
                engine_final,
                reference: find(reference, task),
                baseline,
                at_baseline: engine_final
                    .zip(baseline)
                    .map(|(f, b)| is_at_baseline(f, b)),
            }
        })
        .collect()
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "task",
        "engine_final",
        "reference",
        "baseline",
        "at_baseline",
    ])?;
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.task.clone(),
            opt(r.engine_final),
            opt(r.reference),
            opt(r.baseline),
            r.at_baseline.map(|b| b.to_string()).unwrap_or_default(),
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| ReportError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub task: String,
    pub label: String,
    pub count: usize,
    pub proportion: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassBalance {
    pub rows: Vec<BalanceRow>,
    pub svg: String,
    pub warnings: Vec<String>,
}

const BAR_COLORS: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

/// Per-task label counts and proportions, plus a stacked-bar SVG. Tasks whose
/// histogram is empty are left out with a warning.
pub fn render_class_balance(histograms: &[(String, Vec<(String, usize)>)]) -> ClassBalance {
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    let mut bars: Vec<(&str, Vec<(&str, usize, f64)>)> = Vec::new();
    for (task, hist) in histograms {
        let total: usize = hist.iter().map(|(_, c)| c).sum();
        if total == 0 {
            warnings.push(format!(
                "task `{task}` has an empty class histogram; omitted"
            ));
            continue;
        }
        let mut segs = Vec::new();
        for (label, count) in hist {
            let proportion = *count as f64 / total as f64;
            rows.push(BalanceRow {
                task: task.clone(),
                label: label.clone(),
                count: *count,
                proportion,
            });
            segs.push((label.as_str(), *count, proportion));
        }
        bars.push((task, segs));
    }

    let (left, bar_w, bar_h, gap) = (180.0, 600.0, 22.0, 10.0);
    let height = 40.0 + bars.len() as f64 * (bar_h + gap) + 20.0;
    let width = left + bar_w + 40.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<?xml version="1.0" encoding="UTF-8" standalone="no"?>"#
    );
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{left}" y="22" font-size="14">class balance</text>"#
    );
    for (i, (task, segs)) in bars.iter().enumerate() {
        let y = 40.0 + i as f64 * (bar_h + gap);
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 8.0,
            y + bar_h * 0.7,
            xml_escape(task)
        );
        let mut x = left;
        for (j, (label, count, p)) in segs.iter().enumerate() {
            let seg_w = p * bar_w;
            let _ = writeln!(
                svg,
                r#"<rect x="{x:.2}" y="{y:.1}" width="{seg_w:.2}" height="{bar_h}" fill="{}" stroke="white"><title>{}: {} ({:.3})</title></rect>"#,
                BAR_COLORS[j % BAR_COLORS.len()],
                xml_escape(label),
                count,
                p
            );
            x += seg_w;
        }
    }
    svg.push_str("</svg>\n");
    ClassBalance {
        rows,
        svg,
        warnings,
    }
}

pub fn balance_csv(rows: &[BalanceRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["task", "label", "count", "proportion"])?;
    for r in rows {
        w.write_record([
            r.task.clone(),
            r.label.clone(),
            r.count.to_string(),
            format!("{:.6}", r.proportion),
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| ReportError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}
