//! Class-balance summary table and bar chart for a few task histograms.

use chronoprobe::report::{balance_csv, render_class_balance};

fn main() {
    let histograms = vec![
        (
            "subj_number".to_string(),
            vec![("NN".to_string(), 3), ("NNS".to_string(), 1)],
        ),
        (
            "tree_depth".to_string(),
            (5..11).map(|d| (d.to_string(), 10)).collect(),
        ),
        ("empty_task".to_string(), vec![]),
    ];
    let balance = render_class_balance(&histograms);
    print!("{}", balance_csv(&balance.rows).unwrap());
    for w in &balance.warnings {
        eprintln!("warning: {w}");
    }
    let out = std::env::temp_dir().join("chronoprobe-class-balance.svg");
    std::fs::write(&out, balance.svg).unwrap();
    println!("chart: {}", out.display());
}
