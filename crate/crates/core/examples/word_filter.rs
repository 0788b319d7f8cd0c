//! Ban words at decoding time, including spellings split across tokens, and
//! check generations for violations.

mod common;

use ffn_lens::model::{generate, Decoding};
use ffn_lens::steering::{bundled_prompts, word_filter_generate, WordFilter};
use ffn_lens::ForwardOptions;

fn main() -> anyhow::Result<()> {
    let (model, tok) = common::model()?;
    let prompts: Vec<String> = bundled_prompts().into_iter().take(10).collect();
    let decoding = |n: usize| Decoding::TopK { k: 40, seed: n as u64 };

    // ban the first few words the model produces on its own, so the filter has work to do
    let first = generate(&model, &tok.encode(&prompts[0]), 15, decoding(0), &ForwardOptions::default())?;
    let mut banned: Vec<String> = Vec::new();
    for w in tok.decode(&first)?.split_whitespace().map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_string()) {
        if w.len() >= 3 && !banned.contains(&w) && banned.len() < 4 {
            banned.push(w);
        }
    }
    let filter = WordFilter::compile(&tok, &banned);
    println!("banned: {banned:?}");

    let (mut unfiltered, mut filtered) = (0, 0);
    for (n, prompt) in prompts.iter().enumerate() {
        let r = word_filter_generate(&model, &tok, &tok.encode(prompt), 15, &filter, decoding(n))?;
        unfiltered += filter.violations(&tok, &r.baseline)?.len();
        filtered += filter.violations(&tok, &r.steered)?.len();
        if n < 2 {
            println!("{prompt:?}\n  plain   : {:?}\n  filtered: {:?}", tok.decode(&r.baseline)?, tok.decode(&r.steered)?);
        }
    }
    println!("banned-word occurrences: {unfiltered} without the filter, {filtered} with it");
    Ok(())
}
