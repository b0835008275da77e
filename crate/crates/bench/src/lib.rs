//! Deterministic inputs for the benchmarks.

use failrules_core::synth::{generate, quiet_scenario};
use failrules_core::{Label, SensorFrame, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// A failure-free synthetic stream with `samples` rows.
pub fn stream(samples: usize, seed: u64) -> SensorFrame {
    generate(&quiet_scenario(seed, samples)).unwrap().0
}

/// Rows where feature 0 above 0.5 marks a failure.
pub fn separable_rows(n: usize, features: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Label>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..features).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    let labels = rows
        .iter()
        .map(|r| {
            if r[0] > 0.5 {
                Label::Failure
            } else {
                Label::NoFailure
            }
        })
        .collect();
    (rows, labels)
}

pub fn binary_signal(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| if rng.random_bool(0.1) { 1.0 } else { 0.0 })
        .collect()
}
