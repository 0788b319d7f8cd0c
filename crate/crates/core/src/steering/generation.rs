use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::assets::Tokenizer;
use crate::error::Result;
use crate::lens::project_vector;
use crate::math;
use crate::model::{generate, generate_with, Decoding, ForwardOptions, LogitProcessor, Model};

use super::config::SteeringConfig;
use super::filter::WordFilter;
use super::toxicity::ToxicityScorer;

/// A baseline continuation next to the controlled one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub prompt: Vec<u32>,
    pub baseline: Vec<u32>,
    pub steered: Vec<u32>,
}

pub fn steer_generate(
    model: &Model,
    prompt: &[u32],
    steps: usize,
    config: &SteeringConfig,
    decoding: Decoding,
) -> Result<GenerationResult> {
    config.validate(model.config())?;
    let baseline = generate(model, prompt, steps, decoding, &ForwardOptions::default())?;
    let steered_opts = ForwardOptions::default().with_interventions(config.to_interventions());
    let steered = generate(model, prompt, steps, decoding, &steered_opts)?;
    Ok(GenerationResult { prompt: prompt.to_vec(), baseline, steered })
}

pub fn word_filter_generate(
    model: &Model,
    tokenizer: &Tokenizer,
    prompt: &[u32],
    steps: usize,
    filter: &WordFilter,
    decoding: Decoding,
) -> Result<GenerationResult> {
    let opts = ForwardOptions::default();
    let baseline = generate(model, prompt, steps, decoding, &opts)?;
    let mut proc = filter.processor(tokenizer, prompt.len());
    let steered = generate_with(model, prompt, steps, decoding, &opts, &mut proc)?;
    Ok(GenerationResult { prompt: prompt.to_vec(), baseline, steered })
}

/// Union of the top-`k` projection tokens of every picked value vector.
pub fn concept_tokens(model: &Model, config: &SteeringConfig, k: usize) -> Result<BTreeSet<u32>> {
    let mut out = BTreeSet::new();
    for p in &config.interventions {
        let v = model.weights().value_vector(p.layer, p.index)?;
        out.extend(project_vector(model, v, false)?.top(k).iter().copied());
    }
    Ok(out)
}

/// Records the probability mass on a token set at every decoding step.
struct MassProbe<'a> {
    tokens: &'a BTreeSet<u32>,
    masses: Vec<f64>,
}

impl LogitProcessor for MassProbe<'_> {
    fn process(&mut self, _: &[u32], logits: &mut [f32]) {
        let p = math::softmax(logits);
        self.masses.push(self.tokens.iter().map(|&t| p[t as usize] as f64).sum());
    }
}

/// Mean per-step probability mass on `tokens` while generating.
pub fn generation_mass(
    model: &Model,
    prompt: &[u32],
    steps: usize,
    decoding: Decoding,
    options: &ForwardOptions,
    tokens: &BTreeSet<u32>,
) -> Result<(Vec<u32>, f64)> {
    let mut probe = MassProbe { tokens, masses: Vec::with_capacity(steps) };
    let out = generate_with(model, prompt, steps, decoding, options, &mut probe)?;
    let mean = probe.masses.iter().sum::<f64>() / probe.masses.len().max(1) as f64;
    Ok((out, mean))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptOutcome {
    pub prompt: String,
    pub baseline_text: String,
    pub steered_text: String,
    pub baseline_mass: f64,
    pub steered_mass: f64,
    pub baseline_toxicity: f64,
    pub steered_toxicity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringReport {
    pub label: String,
    pub steps: usize,
    pub concept_tokens: usize,
    pub mean_baseline_mass: f64,
    pub mean_steered_mass: f64,
    pub mean_baseline_toxicity: f64,
    pub mean_steered_toxicity: f64,
    pub prompts: Vec<PromptOutcome>,
}

/// Baseline and steered generations for each prompt with concept-token mass
/// (top-30 tokens of the picked vectors) and the `toxicity` attribute.
pub fn steer_prompts(
    model: &Model,
    tokenizer: &Tokenizer,
    prompts: &[String],
    config: &SteeringConfig,
    steps: usize,
    decoding: Decoding,
    scorer: &dyn ToxicityScorer,
) -> Result<SteeringReport> {
    config.validate(model.config())?;
    let tokens = concept_tokens(model, config, crate::lens::DEFAULT_TOP_K)?;
    let base_opts = ForwardOptions::default();
    let steer_opts = ForwardOptions::default().with_interventions(config.to_interventions());
    let mut outcomes = Vec::with_capacity(prompts.len());
    for prompt in prompts {
        let ids = tokenizer.encode(prompt);
        let (base, baseline_mass) = generation_mass(model, &ids, steps, decoding, &base_opts, &tokens)?;
        let (steer, steered_mass) = generation_mass(model, &ids, steps, decoding, &steer_opts, &tokens)?;
        let baseline_text = tokenizer.decode(&base)?;
        let steered_text = tokenizer.decode(&steer)?;
        outcomes.push(PromptOutcome {
            prompt: prompt.clone(),
            baseline_toxicity: scorer.score(&baseline_text)?.get("toxicity"),
            steered_toxicity: scorer.score(&steered_text)?.get("toxicity"),
            baseline_text,
            steered_text,
            baseline_mass,
            steered_mass,
        });
    }
    let mean = |f: fn(&PromptOutcome) -> f64| outcomes.iter().map(f).sum::<f64>() / outcomes.len().max(1) as f64;
    Ok(SteeringReport {
        label: config.label.clone(),
        steps,
        concept_tokens: tokens.len(),
        mean_baseline_mass: mean(|o| o.baseline_mass),
        mean_steered_mass: mean(|o| o.steered_mass),
        mean_baseline_toxicity: mean(|o| o.baseline_toxicity),
        mean_steered_toxicity: mean(|o| o.steered_toxicity),
        prompts: outcomes,
    })
}
