//! The three ways token embeddings become probe features: masked mean
//! pooling, positional differences for sentence sequences, and pair
//! concatenation.

use chronoprobe::compose::{mean_pool, pair_concat, positional_features};

fn main() {
    // Three tokens of dimension 2; the middle one is a special token.
    let tokens = [1.0_f32, 2.0, 100.0, 100.0, 3.0, 4.0];
    let pooled = mean_pool(&tokens, 2, &[true, false, true]).unwrap();
    println!("mean_pool over content tokens: {pooled:?}");

    let sentences = vec![vec![1.0, 1.0], vec![0.0, 2.0], vec![3.0, -1.0]];
    let positional = positional_features(&sentences).unwrap();
    println!("positional (e1, e1-e2, e1-e3): {positional:?}");

    let pair = pair_concat(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
    println!("pair_concat: {pair:?}");
}
