//! Model assets: weights, configuration, and the byte-level BPE tokenizer.

mod config;
mod tiny;
mod tokenizer;
mod weights;

use std::path::Path;

pub use config::{Activation, ConfigDescriptor, ModelConfig};
pub use tiny::{build_tiny_random_model, TINY_MAX_DIM, TINY_MAX_VOCAB};
pub use tokenizer::{byte_to_unicode, escape_bytes, Tokenizer, END_OF_TEXT, MERGES_FILE, VOCAB_FILE};
pub use weights::{describe, load_weights, load_weights_from_bytes, LayerWeights, ModelWeights, CONFIG_FILE, WEIGHTS_FILE};

use crate::error::Result;

/// Loads the weights in `dir` and, when `vocab.json`/`merges.txt` are present,
/// the tokenizer.
pub fn load_model_dir(dir: &Path) -> Result<(ModelWeights, Option<Tokenizer>)> {
    let weights = load_weights(dir)?;
    let tokenizer = if dir.join(VOCAB_FILE).exists() && dir.join(MERGES_FILE).exists() {
        Some(Tokenizer::from_dir(dir)?)
    } else {
        None
    };
    Ok((weights, tokenizer))
}

/// Writes the bundled GPT-2 tokenizer files into `dir`.
pub fn write_gpt2_tokenizer(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(VOCAB_FILE), include_str!("../../assets/gpt2/vocab.json"))?;
    std::fs::write(dir.join(MERGES_FILE), include_str!("../../assets/gpt2/merges.txt"))?;
    Ok(())
}
