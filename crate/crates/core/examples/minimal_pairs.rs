//! Scores minimal pairs from per-position masked log-probabilities. A pair
//! counts as correct only when the acceptable sentence scores strictly higher.

use std::collections::HashMap;

use chronoprobe::mpscore::{pll_score, task_accuracy};
use chronoprobe::taskset::{Level, MinimalPair, MinimalPairTask};

fn main() {
    let pairs = vec![
        MinimalPair {
            pair_id: "0".into(),
            good: "The cats sleep.".into(),
            bad: "The cats sleeps.".into(),
        },
        MinimalPair {
            pair_id: "1".into(),
            good: "Who did you see?".into(),
            bad: "Who did you see him?".into(),
        },
        MinimalPair {
            pair_id: "2".into(),
            good: "She left.".into(),
            bad: "She lefted.".into(),
        },
    ];
    let task = MinimalPairTask::new("subject_verb_agreement", Level::Morphology, pairs).unwrap();

    let logprobs: [(&str, &[f64]); 6] = [
        ("0#good", &[-1.2, -0.8, -2.0]),
        ("0#bad", &[-1.2, -0.8, -4.5]),
        ("1#good", &[-0.5, -1.0, -0.7, -1.1]),
        ("1#bad", &[-0.5, -1.0, -0.7, -1.1, -0.2]),
        ("2#good", &[-1.0, -1.0]),
        ("2#bad", &[-1.0, -1.0]),
    ];
    let mut scores = HashMap::new();
    for (id, lp) in logprobs {
        let s = pll_score(id, lp).unwrap();
        println!("{id:7} pll = {:.2}", s.pll);
        scores.insert(id.to_string(), s);
    }
    // The last pair is an exact tie and is judged incorrect.
    println!("accuracy: {:.3}", task_accuracy(&task, &scores).unwrap());
}
