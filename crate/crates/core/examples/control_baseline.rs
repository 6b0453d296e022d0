//! Shuffled-label control: a probe trained on labels that were permuted
//! across the dataset cannot beat the majority-class rate by much, which is
//! the yardstick for reading real probe accuracy.

use chronoprobe::compose::{build_features, index_records, Method};
use chronoprobe::embedcache::{CacheRecord, TokenMatrix};
use chronoprobe::probe::{
    accuracy, design_matrix, encode_labels, predict_indices, train, ProbeConfig,
};
use chronoprobe::taskset::{
    shuffle_labels, split_dataset, Example, Level, ProbingTask, TaskKind, DEFAULT_RATIOS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 600;
    let examples: Vec<Example> = (0..n)
        .map(|i| Example {
            id: format!("e{i}"),
            sentences: vec![format!("sentence {i}")],
            label: if rng.random::<f64>() < 0.7 {
                "NN"
            } else {
                "NNS"
            }
            .to_string(),
            split: None,
        })
        .collect();
    // Embeddings carry a real signal for the true labels.
    let records: Vec<CacheRecord> = examples
        .iter()
        .map(|ex| {
            let shift = if ex.label == "NN" { 1.0 } else { -1.0 };
            let row: Vec<f32> = (0..6)
                .map(|_| (shift + rng.sample::<f64, _>(StandardNormal)) as f32)
                .collect();
            CacheRecord::new(format!("{}#0", ex.id), TokenMatrix::from_rows(&[row]))
        })
        .collect();
    let task = ProbingTask::new(
        "subj_number",
        Level::Morphology,
        TaskKind::SingleSentence,
        examples,
        None,
    )
    .unwrap();
    let index = index_records(&records);

    for (name, t) in [
        ("real", task.clone()),
        ("control", shuffle_labels(&task, 5)),
    ] {
        let split = split_dataset(&t, DEFAULT_RATIOS, 0).unwrap();
        let order = t.label_set().to_vec();
        let labels = |idx: &[usize]| -> Vec<String> {
            idx.iter().map(|&i| t.examples()[i].label.clone()).collect()
        };
        let y_train = encode_labels(&labels(&split.train), &order).unwrap();
        let y_test = encode_labels(&labels(&split.test), &order).unwrap();
        let x_train =
            design_matrix(&build_features(&t, &split.train, &index, Method::MeanPool).unwrap());
        let x_test =
            design_matrix(&build_features(&t, &split.test, &index, Method::MeanPool).unwrap());
        let model = train(x_train.view(), &y_train, order, &ProbeConfig::default()).unwrap();
        let acc = accuracy(&predict_indices(&model, x_test.view()).unwrap(), &y_test).unwrap();
        let majority = y_test
            .iter()
            .filter(|&&y| y == 0)
            .count()
            .max(y_test.iter().filter(|&&y| y == 1).count()) as f64
            / y_test.len() as f64;
        println!("{name:8} accuracy {acc:.3}  (majority-class rate {majority:.3})");
    }
}
