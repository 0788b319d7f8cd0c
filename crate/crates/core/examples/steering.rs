//! Override value-vector coefficients during generation and measure the
//! shift towards their concept tokens and the perplexity cost.

mod common;

use ffn_lens::model::Decoding;
use ffn_lens::steering::{bundled_prompts, perplexity, steer_prompts, SteeringConfig, SteeringPick, WordlistScorer};
use ffn_lens::corpus::bundled_corpus;

fn main() -> anyhow::Result<()> {
    let (model, tok) = common::model()?;
    let config = if model.config().num_layers == 24 {
        SteeringConfig::safety_picks()
    } else {
        // any picks work on other models; these target the last layer
        let layer = model.config().num_layers - 1;
        let interventions = (0..3).map(|index| SteeringPick { layer, index, coefficient: 10.0 }).collect();
        SteeringConfig { label: "demo".into(), interventions, ..SteeringConfig::empty() }
    };
    let prompts: Vec<String> = bundled_prompts().into_iter().take(5).collect();
    let report = steer_prompts(&model, &tok, &prompts, &config, 12, Decoding::Greedy, &WordlistScorer::bundled())?;
    for p in &report.prompts {
        println!("{:?}\n  base : {:?}\n  steer: {:?}", p.prompt, p.baseline_text, p.steered_text);
    }
    println!("concept mass {:.4} -> {:.4}", report.mean_baseline_mass, report.mean_steered_mass);

    let seqs: Vec<Vec<u32>> = bundled_corpus().iter().take(30).map(|s| tok.encode(s)).collect();
    let base = perplexity(&model, &seqs, &[])?;
    let steered = perplexity(&model, &seqs, &config.to_interventions())?;
    println!("perplexity {:.2} -> {:.2}", base.perplexity, steered.perplexity);
    Ok(())
}
