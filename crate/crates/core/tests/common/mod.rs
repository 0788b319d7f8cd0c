#![allow(dead_code)]

pub mod oracles;

use ffn_lens::assets::{build_tiny_random_model, ModelConfig};
use ffn_lens::model::Model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_model(seed: u64) -> Model {
    Model::new(build_tiny_random_model(seed, &ModelConfig::tiny()).unwrap())
}

pub fn tiny_with(seed: u64, edit: impl FnOnce(&mut ModelConfig)) -> Model {
    let mut cfg = ModelConfig::tiny();
    edit(&mut cfg);
    Model::new(build_tiny_random_model(seed, &cfg).unwrap())
}

/// `n` random token sequences of length 1..=max_len.
pub fn random_inputs(n: usize, vocab: usize, max_len: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
        })
        .collect()
}

pub fn random_vector(rng: &mut impl Rng, d: usize, scale: f32) -> Vec<f32> {
    (0..d).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Plain row-times-matrix product in f64, independent of the library GEMM.
pub fn naive_project(model: &Model, v: &[f32]) -> Vec<f64> {
    let e = &model.weights().token_embedding;
    (0..e.rows()).map(|w| e.row(w).iter().zip(v).map(|(a, b)| *a as f64 * *b as f64).sum()).collect()
}

/// Index of the maximum, ties to the lowest index.
pub fn naive_argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for i in 1..xs.len() {
        if xs[i] > xs[best] {
            best = i;
        }
    }
    best
}
