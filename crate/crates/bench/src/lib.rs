// SPDX-License-Identifier: Apache-2.0

//! Fixtures shared by the criterion benches.

use credal::rng::rng_from;
use credal::Tensor;
use rand::Rng;

/// Deterministic scores in `[-3, 3)`.
pub fn random_scores(len: usize, seed: u64) -> Tensor {
    let mut rng = rng_from(seed, 0);
    let data = (0..len * len).map(|_| rng.random_range(-3.0..3.0)).collect();
    Tensor::new(vec![len, len], data).expect("square")
}

/// Deterministic tokens in `0..vocab`.
pub fn random_tokens(len: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng_from(seed, 1);
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}
