//! End to end on a synthetic checkpoint series: embeddings whose class signal
//! grows and then stays constant. Runs the full grid (real + shuffled-label
//! control at every checkpoint) and prints the resulting trajectory.
//!
//! Usage: `cargo run --example synthetic_chronology [output dir]`

use std::path::PathBuf;

use chronoprobe::runner::{run, JobStatus, RunConfig};
use chronoprobe::synthetic::{write_chronology, ChronologySpec};
use chronoprobe::trajectory::PointKind;

fn main() {
    let (_guard, dir) = match std::env::args().nth(1) {
        Some(d) => (None, PathBuf::from(d)),
        None => {
            let t = tempfile::tempdir().unwrap();
            let p = t.path().to_path_buf();
            (Some(t), p)
        }
    };
    let spec = ChronologySpec::default();
    let fixture = write_chronology(&dir, &spec).unwrap();
    let config = RunConfig::load(&fixture.config_path).unwrap();
    let (_, outcome) = run(&config).unwrap();

    println!(
        "{:>8} {:>6} {:>9} {:>9}",
        "step", "alpha", "real", "control"
    );
    for (step, alpha) in spec.steps.iter().zip(&spec.alphas) {
        let acc = |kind| {
            outcome
                .results
                .iter()
                .find(|r| r.key.step == *step && r.key.kind == kind && r.status == JobStatus::Ok)
                .and_then(|r| r.accuracy)
                .unwrap()
        };
        println!(
            "{step:>8} {alpha:>6.2} {:>9.3} {:>9.3}",
            acc(PointKind::Real),
            acc(PointKind::Control)
        );
    }
    print!(
        "{}",
        std::fs::read_to_string(config.output_dir.join("stabilization.csv")).unwrap()
    );
    println!(
        "expected stabilization step: {}",
        spec.expected_stabilization().unwrap()
    );
    println!("outputs written to {}", config.output_dir.display());
}
