#![allow(dead_code)]

use std::path::Path;

use ffn_lens::assets::{build_tiny_random_model, load_model_dir, ModelConfig, Tokenizer};
use ffn_lens::Model;

/// The model directory named by the first argument (or `FFN_LENS_MODEL`),
/// else a small random model over the GPT-2 vocabulary.
pub fn model() -> anyhow::Result<(Model, Tokenizer)> {
    let dir = std::env::args().nth(1).or_else(|| std::env::var("FFN_LENS_MODEL").ok());
    match dir {
        Some(dir) => {
            let (weights, tok) = load_model_dir(Path::new(&dir))?;
            println!("model: {dir}");
            Ok((Model::new(weights), tok.unwrap_or_else(Tokenizer::gpt2)))
        }
        None => {
            let config = ModelConfig { vocab_size: 50257, ..ModelConfig::tiny() };
            println!("model: random tiny model (pass a GPT-2 directory to use real weights)");
            Ok((Model::new(build_tiny_random_model(0, &config)?), Tokenizer::gpt2()))
        }
    }
}

pub fn show(tok: &Tokenizer, ids: &[u32]) -> String {
    ids.iter().map(|&id| tok.display_token(id).unwrap_or_default()).collect::<Vec<_>>().join(" | ")
}
