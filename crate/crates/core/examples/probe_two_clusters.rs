//! Trains the logistic-regression probe on two Gaussian clusters and reports
//! held-out accuracy and optimizer telemetry.

use chronoprobe::probe::{accuracy, predict, train, ProbeConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn sample(rng: &mut ChaCha8Rng, n: usize) -> (Array2<f64>, Vec<usize>) {
    let mut x = Array2::zeros((n, 2));
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let center = if label == 0 { -1.5 } else { 1.5 };
        x[[i, 0]] = center + rng.sample::<f64, _>(StandardNormal);
        x[[i, 1]] = rng.sample::<f64, _>(StandardNormal);
        y.push(label);
    }
    (x, y)
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (x_train, y_train) = sample(&mut rng, 400);
    let (x_test, y_test) = sample(&mut rng, 200);
    let labels = vec!["left".to_string(), "right".to_string()];

    let model = train(
        x_train.view(),
        &y_train,
        labels.clone(),
        &ProbeConfig::default(),
    )
    .unwrap();
    let pred = predict(&model, x_test.view()).unwrap();
    let gold: Vec<String> = y_test.iter().map(|&i| labels[i].clone()).collect();

    let t = &model.telemetry;
    println!("held-out accuracy: {:.3}", accuracy(&pred, &gold).unwrap());
    println!(
        "iterations: {}  final loss: {:.5}  gradient inf-norm: {:.2e}  converged: {}",
        t.iters_used, t.final_loss, t.final_grad_norm, t.converged
    );
    println!("weights:\n{:.4}", model.weights);
}
