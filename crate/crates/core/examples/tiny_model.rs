//! Build a random model, save it as a GPT-2 style directory and load it back.

use ffn_lens::assets::{build_tiny_random_model, describe, load_model_dir, write_gpt2_tokenizer, ModelConfig};
use ffn_lens::{ForwardOptions, Model};

fn main() -> anyhow::Result<()> {
    let dir = tempfile_dir()?;
    let config = ModelConfig { vocab_size: 50257, ..ModelConfig::tiny() };
    let weights = build_tiny_random_model(42, &config)?;
    weights.save(&dir)?;
    write_gpt2_tokenizer(&dir)?;

    let (loaded, tok) = load_model_dir(&dir)?;
    println!("saved to {}: {:?}", dir.display(), describe(&loaded));
    let tok = tok.expect("tokenizer files were written");
    let model = Model::new(loaded);
    let ids = tok.encode("Hello there");
    let out = model.forward(&ids, &ForwardOptions::default())?;
    println!("{} tokens -> logits {:?}", ids.len(), out.logits.shape());
    Ok(())
}

fn tempfile_dir() -> std::io::Result<std::path::PathBuf> {
    let dir = std::env::temp_dir().join("ffn-lens-tiny-example");
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}
