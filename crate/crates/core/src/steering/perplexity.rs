use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::model::{ForwardOptions, Intervention, Model};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    pub perplexity: f64,
    pub mean_nll: f64,
    pub tokens: usize,
    pub sequences: usize,
}

/// `exp` of the mean next-token negative log-likelihood over `sequences`,
/// each truncated to the context window. A sequence contributes
/// `len − 1` predictions; prepend a BOS id to score its first token too.
pub fn perplexity(model: &Model, sequences: &[Vec<u32>], interventions: &[Intervention]) -> Result<PerplexityReport> {
    let max = model.config().max_positions;
    let opts = ForwardOptions::default().with_interventions(interventions.to_vec());
    let (mut nll, mut tokens, mut used) = (0.0f64, 0usize, 0usize);
    for seq in sequences {
        let seq = &seq[..seq.len().min(max)];
        if seq.len() < 2 {
            continue;
        }
        let out = model.forward(seq, &opts)?;
        for i in 1..seq.len() {
            nll -= math::log_prob(out.logits.row(i - 1), seq[i] as usize);
        }
        tokens += seq.len() - 1;
        used += 1;
    }
    if tokens == 0 {
        return Err(Error::Empty("corpus has no predictable tokens".into()));
    }
    let mean_nll = nll / tokens as f64;
    Ok(PerplexityReport { perplexity: mean_nll.exp(), mean_nll, tokens, sequences: used })
}
