//! Finds where accuracy-vs-checkpoint curves settle, using a hand-drawn
//! caricature of curves per linguistic level (not measured data).

use chronoprobe::taskset::Level;
use chronoprobe::trajectory::{
    assemble, settled_before_end, stabilization_point, PointKind, TaskMeta,
};

const CARICATURE: &str = include_str!("../tests/fixtures/caricature_levels.csv");

fn main() {
    let mut reader = csv::Reader::from_reader(CARICATURE.as_bytes());
    let rows: Vec<Vec<f64>> = reader
        .records()
        .map(|r| r.unwrap().iter().map(|v| v.parse().unwrap()).collect())
        .collect();

    for (col, level) in Level::ALL.into_iter().enumerate() {
        let points: Vec<(u64, f64)> = rows.iter().map(|r| (r[0] as u64, r[col + 1])).collect();
        let meta = TaskMeta {
            model_id: "caricature".into(),
            task_name: level.as_str().into(),
            level,
            kind: PointKind::Real,
        };
        let traj = assemble(&points, &meta).unwrap();
        for eps in [0.01, 0.02, 0.05] {
            let step = stabilization_point(&traj, eps).unwrap();
            let settled = settled_before_end(&traj, eps).unwrap().is_some();
            println!(
                "{:10} eps={eps:<4} stabilizes at {:>8} {}",
                level.as_str(),
                step,
                if settled {
                    ""
                } else {
                    "(not before the last checkpoint)"
                }
            );
        }
    }
}
