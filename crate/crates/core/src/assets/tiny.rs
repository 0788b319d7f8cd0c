use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::weights::{LayerWeights, ModelWeights};
use crate::error::{Error, Result};
use crate::math::Matrix;

/// Largest per-dimension size accepted for synthetic models. The vocabulary may
/// be as large as GPT-2's so that a tiny model can be paired with the real
/// tokenizer.
pub const TINY_MAX_DIM: usize = 256;
pub const TINY_MAX_VOCAB: usize = 50257;

/// Deterministic random GPT-2-shaped weights. Every tensor (biases and LN
/// parameters included) is non-trivial so that tests exercise all terms.
pub fn build_tiny_random_model(seed: u64, config: &ModelConfig) -> Result<ModelWeights> {
    config.validate()?;
    let dims = [
        ("num_layers", config.num_layers),
        ("hidden_dim", config.hidden_dim),
        ("ffn_dim", config.ffn_dim),
        ("num_heads", config.num_heads),
        ("max_positions", config.max_positions),
    ];
    for (name, v) in dims {
        if v > TINY_MAX_DIM {
            return Err(Error::Config(format!("{name} = {v} exceeds the tiny-model limit {TINY_MAX_DIM}")));
        }
    }
    if config.vocab_size > TINY_MAX_VOCAB {
        return Err(Error::Config(format!("vocab_size {} exceeds {TINY_MAX_VOCAB}", config.vocab_size)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sample = |n: usize, mean: f32, std: f32| -> Vec<f32> {
        let dist = Normal::new(mean, std).expect("valid normal");
        (0..n).map(|_| dist.sample(&mut rng)).collect()
    };
    let (d, dm) = (config.hidden_dim, config.ffn_dim);
    let w_std = 1.0 / (d as f32).sqrt();
    let token_embedding = Matrix::from_vec(config.vocab_size, d, sample(config.vocab_size * d, 0.0, 0.5));
    let position_embedding = Matrix::from_vec(config.max_positions, d, sample(config.max_positions * d, 0.0, 0.1));
    let mut layers = Vec::with_capacity(config.num_layers);
    for _ in 0..config.num_layers {
        layers.push(LayerWeights {
            ln1_gain: sample(d, 1.0, 0.1),
            ln1_bias: sample(d, 0.0, 0.05),
            attn_qkv: Matrix::from_vec(d, 3 * d, sample(d * 3 * d, 0.0, w_std)),
            attn_qkv_bias: sample(3 * d, 0.0, 0.05),
            attn_out: Matrix::from_vec(d, d, sample(d * d, 0.0, w_std)),
            attn_out_bias: sample(d, 0.0, 0.05),
            ln2_gain: sample(d, 1.0, 0.1),
            ln2_bias: sample(d, 0.0, 0.05),
            ffn_keys: Matrix::from_vec(dm, d, sample(dm * d, 0.0, w_std)),
            ffn_key_bias: sample(dm, 0.0, 0.05),
            ffn_values: Matrix::from_vec(dm, d, sample(dm * d, 0.0, 1.0 / (dm as f32).sqrt())),
            ffn_value_bias: sample(d, 0.0, 0.05),
        });
    }
    let weights = ModelWeights {
        config: config.clone(),
        token_embedding,
        position_embedding,
        layers,
        final_ln_gain: sample(d, 1.0, 0.1),
        final_ln_bias: sample(d, 0.0, 0.05),
    };
    weights.validate()?;
    Ok(weights)
}
