use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

use super::forward::{KvCache, Model};
use super::options::ForwardOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decoding {
    Greedy,
    TopK { k: usize, seed: u64 },
}

/// Hook run on each step's logits after the options' logit mask is added and
/// before a token is chosen. `context` is prompt plus tokens emitted so far.
pub trait LogitProcessor {
    fn process(&mut self, context: &[u32], logits: &mut [f32]);
}

impl<F: FnMut(&[u32], &mut [f32])> LogitProcessor for F {
    fn process(&mut self, context: &[u32], logits: &mut [f32]) {
        self(context, logits)
    }
}

struct NoProcessor;

impl LogitProcessor for NoProcessor {
    fn process(&mut self, _: &[u32], _: &mut [f32]) {}
}

/// Extends `prompt` by `steps` tokens and returns only the new tokens.
pub fn generate(model: &Model, prompt: &[u32], steps: usize, decoding: Decoding, options: &ForwardOptions) -> Result<Vec<u32>> {
    generate_with(model, prompt, steps, decoding, options, &mut NoProcessor)
}

pub fn generate_with(
    model: &Model,
    prompt: &[u32],
    steps: usize,
    decoding: Decoding,
    options: &ForwardOptions,
    processor: &mut dyn LogitProcessor,
) -> Result<Vec<u32>> {
    let cfg = model.config();
    if steps == 0 {
        return Err(Error::Validation("generation needs at least one step".into()));
    }
    if prompt.is_empty() {
        return Err(Error::Empty("prompt has no tokens".into()));
    }
    // the final emitted token is never fed back, so it needs no position
    let needed = prompt.len() + steps - 1;
    if needed > cfg.max_positions {
        return Err(Error::SequenceTooLong { len: needed, max: cfg.max_positions });
    }
    if let Decoding::TopK { k: 0, .. } = decoding {
        return Err(Error::Validation("top-k sampling requires k >= 1".into()));
    }
    let opts = ForwardOptions { trace_enabled: false, ..options.clone() };
    let mut rng = match decoding {
        Decoding::TopK { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Decoding::Greedy => None,
    };

    let mut cache = KvCache::new(cfg.num_layers);
    let mut context = prompt.to_vec();
    let mut out = Vec::with_capacity(steps);
    let mut pending = prompt.to_vec();
    for _ in 0..steps {
        let fwd = model.forward_incremental(&mut cache, &pending, &opts)?;
        let mut logits = fwd.logits.row(fwd.logits.rows() - 1).to_vec();
        if let Some(mask) = &options.logit_mask {
            for (l, m) in logits.iter_mut().zip(mask) {
                *l += m;
            }
        }
        processor.process(&context, &mut logits);
        let next = match (decoding, rng.as_mut()) {
            (Decoding::TopK { k, .. }, Some(rng)) => sample_top_k(&logits, k, rng)?,
            _ => greedy(&logits)?,
        };
        out.push(next);
        context.push(next);
        pending.clear();
        pending.push(next);
    }
    Ok(out)
}

fn greedy(logits: &[f32]) -> Result<u32> {
    let best = math::argmax(logits);
    if logits[best] == f32::NEG_INFINITY || logits[best].is_nan() {
        return Err(Error::Validation("every token is masked".into()));
    }
    Ok(best as u32)
}

/// Samples among the `k` highest logits (finite ones only).
pub fn sample_top_k(logits: &[f32], k: usize, rng: &mut impl Rng) -> Result<u32> {
    let candidates: Vec<usize> = math::top_k_indices(logits, k)
        .into_iter()
        .filter(|&i| logits[i].is_finite())
        .collect();
    let Some(&first) = candidates.first() else {
        return Err(Error::Validation("every token is masked".into()));
    };
    let max = logits[first] as f64;
    let weights: Vec<f64> = candidates.iter().map(|&i| (logits[i] as f64 - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut target = rng.random::<f64>() * total;
    for (&i, w) in candidates.iter().zip(&weights) {
        if target < *w {
            return Ok(i as u32);
        }
        target -= w;
    }
    Ok(*candidates.last().expect("non-empty") as u32)
}
