//! Property tests for the invariants each module promises.

use std::collections::BTreeMap;

use chronoprobe::compose::{mean_pool, pair_concat};
use chronoprobe::embedcache::{
    cache_path, decode, encode, CacheKey, CacheRecord, PayloadKind, TokenMatrix,
};
use chronoprobe::mpscore::{judge_pair, pll_score, task_accuracy, SentenceScore};
use chronoprobe::probe::{predict_indices, train, ProbeConfig};
use chronoprobe::report::{accuracy_csv, render_trajectories, AccuracyRow, ChartStyle};
use chronoprobe::taskset::{
    class_distribution, load_classification_task, shuffle_labels, split_dataset, write_jsonl,
    Example, Level, MinimalPair, MinimalPairTask, ProbingTask, TaskKind, TaskSchema,
    DEFAULT_RATIOS,
};
use chronoprobe::trajectory::{
    assemble, iterations_to_sentences, parse_records, stabilization_point,
    trajectories_from_records, ModelProfile, PointKind, TaskMeta,
};
use ndarray::Array2;
use proptest::prelude::*;

fn task_from(labels: &[u8]) -> ProbingTask {
    let examples = labels
        .iter()
        .enumerate()
        .map(|(i, l)| Example {
            id: format!("e{i}"),
            sentences: vec![format!("s{i}")],
            label: format!("L{l}"),
            split: None,
        })
        .collect();
    ProbingTask::new("t", Level::Syntax, TaskKind::SingleSentence, examples, None).unwrap()
}

fn meta() -> TaskMeta {
    TaskMeta {
        model_id: "m".into(),
        task_name: "t".into(),
        level: Level::Morphology,
        kind: PointKind::Real,
    }
}

fn multiset(task: &ProbingTask) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for l in task.labels() {
        *m.entry(l.to_string()).or_insert(0) += 1;
    }
    m
}

fn logprobs(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0f64..0.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn shuffle_keeps_examples_and_label_multiset(rest in prop::collection::vec(0u8..4, 0..80), seed: u64) {
        let labels: Vec<u8> = [0, 1].into_iter().chain(rest).collect();
        let task = task_from(&labels);
        let control = shuffle_labels(&task, seed);
        prop_assert!(control.is_control());
        prop_assert_eq!(multiset(&task), multiset(&control));
        for (a, b) in task.examples().iter().zip(control.examples()) {
            prop_assert_eq!(&a.id, &b.id);
            prop_assert_eq!(&a.sentences, &b.sentences);
        }
        prop_assert_eq!(control.label_set(), task.label_set());
        prop_assert_eq!(class_distribution(&control), class_distribution(&task));
    }

    #[test]
    fn jsonl_load_serialize_load_is_identity(
        rows in prop::collection::vec(("[^\\u{0}]{0,20}", 0u8..3), 2..20),
    ) {
        let examples: Vec<Example> = rows
            .iter()
            .enumerate()
            .map(|(i, (text, l))| Example {
                id: format!("x{i}"),
                sentences: vec![format!("w{text}").trim_end().to_string()],
                label: format!("L{}", if i < 2 { i as u8 } else { *l }),
                split: None,
            })
            .collect();
        let task = ProbingTask::new("t", Level::Discourse, TaskKind::SingleSentence, examples, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        write_jsonl(&task, &path).unwrap();
        let schema = TaskSchema::jsonl_for(&task);
        let once = load_classification_task(&path, &schema).unwrap();
        write_jsonl(&once, &path).unwrap();
        let twice = load_classification_task(&path, &schema).unwrap();
        prop_assert_eq!(once.examples(), task.examples());
        prop_assert_eq!(twice.examples(), task.examples());
        prop_assert_eq!(twice.label_set(), task.label_set());
    }

    #[test]
    fn split_is_a_deterministic_partition(rest in prop::collection::vec(0u8..3, 10..120), seed: u64) {
        let labels: Vec<u8> = [0, 1].into_iter().chain(rest).collect();
        let task = task_from(&labels);
        let s = split_dataset(&task, DEFAULT_RATIOS, seed).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.dev).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..task.len()).collect::<Vec<_>>());
        let n = task.len() as f64;
        prop_assert_eq!(s.dev.len(), ((n * 0.1).round() as usize).max(1));
        prop_assert_eq!(s.test.len(), ((n * 0.1).round() as usize).max(1));
        prop_assert_eq!(&s, &split_dataset(&task, DEFAULT_RATIOS, seed).unwrap());
    }

    #[test]
    fn cache_round_trip(
        rows in prop::collection::vec(prop::collection::vec(prop::collection::vec(any::<u32>(), 3), 1..6), 1..10),
        step: u64,
        task in "[a-z_ /.%-]{0,12}",
    ) {
        let key = CacheKey::new("m", step, task, "test", PayloadKind::TokenEmbeddings);
        let records: Vec<CacheRecord> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let data: Vec<f32> = r.iter().flatten().map(|b| f32::from_bits(b & 0xbfff_ffff)).collect();
                CacheRecord::new(format!("r{i}"), TokenMatrix::new(r.len(), 3, data))
            })
            .collect();
        let bytes = encode(&key, &records).unwrap();
        let (k2, r2) = decode(&bytes).unwrap();
        prop_assert_eq!(&k2, &key);
        prop_assert_eq!(encode(&k2, &r2).unwrap(), bytes);
    }

    #[test]
    fn cache_paths_are_injective(a in "[a-zA-Z0-9_./%-]{0,8}", b in "[a-zA-Z0-9_./%-]{0,8}", s1 in 0u64..5, s2 in 0u64..5) {
        let ka = CacheKey::new("m", s1, a.clone(), "test", PayloadKind::TokenEmbeddings);
        let kb = CacheKey::new("m", s2, b.clone(), "test", PayloadKind::TokenEmbeddings);
        let root = std::path::Path::new("/cache");
        prop_assert_eq!(ka == kb, cache_path(root, &ka) == cache_path(root, &kb));
    }

    #[test]
    fn masked_mean_lies_within_the_content_range(
        data in prop::collection::vec(-1e3f32..1e3, 2..40),
        mask_bits: u64,
    ) {
        let dim = 2;
        let tokens = data.len() / dim;
        let data = &data[..tokens * dim];
        let mut mask: Vec<bool> = (0..tokens).map(|t| mask_bits >> (t % 64) & 1 == 1).collect();
        mask[0] = true;
        let pooled = mean_pool(data, dim, &mask).unwrap();
        for j in 0..dim {
            let vals: Vec<f64> = (0..tokens).filter(|&t| mask[t]).map(|t| data[t * dim + j] as f64).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(pooled[j] >= lo - 1e-9 && pooled[j] <= hi + 1e-9);
        }
    }

    #[test]
    fn pair_concat_length(a in prop::collection::vec(-5.0f64..5.0, 1..10)) {
        let b: Vec<f64> = a.iter().map(|v| v * 2.0).collect();
        let c = pair_concat(&a, &b).unwrap();
        prop_assert_eq!(c.len(), 2 * a.len());
        prop_assert_eq!(&c[..a.len()], &a[..]);
    }

    #[test]
    fn judge_is_antisymmetric(a in -100.0f64..0.0, b in -100.0f64..0.0) {
        let s = |pll| SentenceScore { example_id: String::new(), pll, token_count: 1 };
        let (ab, ba) = (judge_pair(&s(a), &s(b)), judge_pair(&s(b), &s(a)));
        if a == b {
            prop_assert!(!ab && !ba);
        } else {
            prop_assert!(ab != ba);
        }
    }

    #[test]
    fn common_logprob_shift_keeps_the_verdict(
        (good, bad) in (1usize..8).prop_flat_map(|n| (logprobs(n), logprobs(n))),
        shift in -5.0f64..0.0,
    ) {
        let moved = |v: &[f64]| v.iter().map(|x| x + shift).collect::<Vec<_>>();
        let before = judge_pair(&pll_score("g", &good).unwrap(), &pll_score("b", &bad).unwrap());
        let after = judge_pair(
            &pll_score("g", &moved(&good)).unwrap(),
            &pll_score("b", &moved(&bad)).unwrap(),
        );
        let (g, b): (f64, f64) = (good.iter().sum(), bad.iter().sum());
        // rounding can only flip pairs whose sums are already within float noise
        if (g - b).abs() > 1e-9 {
            prop_assert_eq!(before, after);
        }
    }

    #[test]
    fn accuracy_is_the_mean_verdict(plls in prop::collection::vec((-50.0f64..0.0, -50.0f64..0.0), 1..60)) {
        let pairs: Vec<MinimalPair> = (0..plls.len())
            .map(|i| MinimalPair { pair_id: format!("p{i}"), good: "g".into(), bad: "b".into() })
            .collect();
        let task = MinimalPairTask::new("mp", Level::Syntax, pairs).unwrap();
        let mut scores = std::collections::HashMap::new();
        for (i, &(g, b)) in plls.iter().enumerate() {
            for (id, pll) in [(format!("p{i}#good"), g), (format!("p{i}#bad"), b)] {
                scores.insert(id.clone(), SentenceScore { example_id: id, pll, token_count: 1 });
            }
        }
        let acc = task_accuracy(&task, &scores).unwrap();
        let expected = plls.iter().filter(|(g, b)| g > b).count() as f64 / plls.len() as f64;
        prop_assert!((0.0..=1.0).contains(&acc));
        prop_assert_eq!(acc, expected);
    }

    #[test]
    fn trajectory_records_round_trip(
        accs in prop::collection::vec(0.0f64..1.0, 1..12),
        batch in 1u64..1024,
    ) {
        let results: Vec<(u64, f64)> = accs.iter().enumerate().map(|(i, &a)| (i as u64 * 7, a)).collect();
        let traj = assemble(&results, &meta()).unwrap();
        let profile = ModelProfile { batch_size: batch, ..ModelProfile::multibert(vec![]) };
        let text: String = traj
            .to_records(&profile, "abc")
            .iter()
            .map(|r| serde_json::to_string(r).unwrap() + "\n")
            .collect();
        let back = trajectories_from_records(&parse_records(&text).unwrap()).unwrap();
        prop_assert_eq!(back, vec![traj]);
    }

    #[test]
    fn stabilization_is_monotone_in_epsilon(
        accs in prop::collection::vec(0.0f64..1.0, 1..15),
        e1 in 0.001f64..0.5,
        e2 in 0.001f64..0.5,
    ) {
        let results: Vec<(u64, f64)> = accs.iter().enumerate().map(|(i, &a)| (i as u64 * 1000, a)).collect();
        let traj = assemble(&results, &meta()).unwrap();
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        prop_assert!(stabilization_point(&traj, hi).unwrap() <= stabilization_point(&traj, lo).unwrap());
        let last = results.last().unwrap().0;
        prop_assert!(stabilization_point(&traj, lo).unwrap() <= last);
    }

    #[test]
    fn assemble_sorts_whatever_the_input_order(mut steps in prop::collection::btree_set(0u64..1_000_000, 1..20)) {
        let steps: Vec<u64> = std::mem::take(&mut steps).into_iter().rev().collect();
        let results: Vec<(u64, f64)> = steps.iter().map(|&s| (s, (s % 100) as f64 / 100.0)).collect();
        let traj = assemble(&results, &meta()).unwrap();
        prop_assert!(traj.points.windows(2).all(|w| w[0].step < w[1].step));
    }

    #[test]
    fn iterations_convert_linearly(a in 0u64..1000, b in 0u64..1000, batch in 1u64..4096) {
        let p = ModelProfile { batch_size: batch, ..ModelProfile::multibert(vec![]) };
        prop_assert_eq!(
            iterations_to_sentences(a + b, &p),
            iterations_to_sentences(a, &p) + iterations_to_sentences(b, &p)
        );
        prop_assert_eq!(iterations_to_sentences(1, &p), 100_000 * batch);
    }

    #[test]
    fn csv_has_one_row_per_ok_result(n in 0usize..40) {
        let rows: Vec<AccuracyRow> = (0..n)
            .map(|i| AccuracyRow {
                model: "m".into(),
                task: format!("t{}", i % 3),
                level: Level::ALL[i % 3],
                step: i as u64,
                sentences_seen: i as u64 * 256,
                kind: if i % 2 == 0 { PointKind::Real } else { PointKind::Control },
                accuracy: (i as f64 / 40.0),
            })
            .collect();
        let csv = accuracy_csv(&rows).unwrap();
        prop_assert_eq!(csv.lines().count(), n + 1);
    }

    #[test]
    fn svg_is_deterministic(accs in prop::collection::vec(0.0f64..1.0, 1..10)) {
        let results: Vec<(u64, f64)> = accs.iter().enumerate().map(|(i, &a)| (i as u64 * 20_000, a)).collect();
        let traj = assemble(&results, &meta()).unwrap();
        let a = render_trajectories(std::slice::from_ref(&traj), &ChartStyle::default()).unwrap();
        let b = render_trajectories(&[traj], &ChartStyle::default()).unwrap();
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Adding the same constant to every class's bias leaves predictions
    /// unchanged; points whose top two logits nearly tie are skipped.
    #[test]
    fn predictions_ignore_a_common_bias_shift(
        xs in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 12..40),
        shift in -8i32..8,
    ) {
        let n = xs.len();
        let x = Array2::from_shape_vec((n, 3), xs.iter().flatten().cloned().collect()).unwrap();
        let y: Vec<usize> = xs.iter().map(|r| usize::from(r[0] + 0.3 * r[1] > 0.0) + usize::from(r[2] > 1.5)).collect();
        prop_assume!(y.iter().any(|&v| v != y[0]));
        let labels = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let model = train(x.view(), &y, labels, &ProbeConfig::default()).unwrap();
        let base = predict_indices(&model, x.view()).unwrap();
        let logits = model.logits(x.view()).unwrap();
        let mut shifted = model.clone();
        shifted.bias.mapv_inplace(|b| b + shift as f64);
        let moved = predict_indices(&shifted, x.view()).unwrap();
        for i in 0..n {
            let mut row: Vec<f64> = logits.row(i).to_vec();
            row.sort_by(|a, b| b.total_cmp(a));
            if row[0] - row[1] > 1e-9 {
                prop_assert_eq!(base[i], moved[i]);
            }
        }
        let history = &model.telemetry.loss_history;
        prop_assert!(history.windows(2).all(|w| w[1] <= w[0]));
    }
}
