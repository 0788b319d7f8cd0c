use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::model::{Model, ResidualTrace};

use super::analysis_position;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubUpdateRecord {
    pub layer: usize,
    pub index: usize,
    pub coefficient: f32,
    pub value_norm: f32,
    /// `|m_i|·‖v_i‖`
    pub weight: f32,
    /// `weight / Σ_j weight_j` over the whole layer; 0 for a degenerate layer.
    pub contribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDominance {
    pub records: Vec<SubUpdateRecord>,
    /// Every weight in the layer is zero, so contributions are undefined.
    pub degenerate: bool,
    pub total_weight: f64,
}

fn layer_weights(model: &Model, trace: &ResidualTrace, position: usize, layer: usize) -> Result<(Vec<f32>, Vec<f32>)> {
    let rec = trace.record(position, layer)?;
    let m = rec
        .coefficients
        .full()
        .ok_or_else(|| Error::MissingTrace(format!("layer {layer} stores sparse coefficients; dominance needs them in full")))?;
    let norms = model.value_norms(layer);
    let weights = m.iter().zip(norms).map(|(c, n)| c.abs() * n).collect();
    Ok((m.to_vec(), weights))
}

/// The `k` sub-updates with the largest `|m_i|·‖v_i‖` (ties by index).
pub fn dominant_subupdates(model: &Model, trace: &ResidualTrace, position: usize, layer: usize, k: usize) -> Result<LayerDominance> {
    dominant_subupdates_filtered(model, trace, position, layer, k, |_, _| false)
}

/// Like [`dominant_subupdates`], choosing only among indices where `exclude`
/// is false. Contributions stay relative to the full layer.
pub fn dominant_subupdates_filtered(
    model: &Model,
    trace: &ResidualTrace,
    position: usize,
    layer: usize,
    k: usize,
    exclude: impl Fn(usize, usize) -> bool,
) -> Result<LayerDominance> {
    let dm = model.config().ffn_dim;
    if k > dm {
        return Err(Error::Index(format!("k = {k} exceeds the {dm} value vectors per layer")));
    }
    let (m, weights) = layer_weights(model, trace, position, layer)?;
    let total: f64 = weights.iter().map(|&w| w as f64).sum();
    let degenerate = total == 0.0;
    let mut candidates: Vec<usize> = (0..dm).filter(|&i| !exclude(layer, i)).collect();
    candidates.sort_unstable_by(|&a, &b| math::rank_order((a, weights[a]), (b, weights[b])));
    candidates.truncate(k);
    let norms = model.value_norms(layer);
    let records = candidates
        .into_iter()
        .map(|i| SubUpdateRecord {
            layer,
            index: i,
            coefficient: m[i],
            value_norm: norms[i],
            weight: weights[i],
            contribution: if degenerate { 0.0 } else { weights[i] as f64 / total },
        })
        .collect();
    Ok(LayerDominance { records, degenerate, total_weight: total })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerContribution {
    pub layer: usize,
    /// Mean over examples of the summed contribution of the top-k sub-updates.
    pub top_k: f64,
    /// Same for k indices drawn uniformly without replacement.
    pub random_k: f64,
    pub degenerate_examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionProfile {
    pub k: usize,
    pub seed: u64,
    pub examples: usize,
    pub layers: Vec<LayerContribution>,
}

pub fn contribution_profile(model: &Model, traces: &[ResidualTrace], k: usize, seed: u64) -> Result<ContributionProfile> {
    if traces.is_empty() {
        return Err(Error::Empty("contribution profile needs at least one trace".into()));
    }
    let cfg = model.config();
    if k > cfg.ffn_dim {
        return Err(Error::Index(format!("k = {k} exceeds the {} value vectors per layer", cfg.ffn_dim)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut top = vec![0.0f64; cfg.num_layers];
    let mut random = vec![0.0f64; cfg.num_layers];
    let mut degenerate = vec![0usize; cfg.num_layers];
    for trace in traces {
        let pos = analysis_position(trace)?;
        for layer in 0..cfg.num_layers {
            let (_, weights) = layer_weights(model, trace, pos, layer)?;
            let total: f64 = weights.iter().map(|&w| w as f64).sum();
            let drawn = sample(&mut rng, cfg.ffn_dim, k);
            if total == 0.0 {
                degenerate[layer] += 1;
                continue;
            }
            let best = math::top_k_indices(&weights, k);
            top[layer] += best.iter().map(|&i| weights[i] as f64).sum::<f64>() / total;
            random[layer] += drawn.iter().map(|i| weights[i] as f64).sum::<f64>() / total;
        }
    }
    let n = traces.len() as f64;
    let layers = (0..cfg.num_layers)
        .map(|layer| LayerContribution {
            layer,
            top_k: top[layer] / n,
            random_k: random[layer] / n,
            degenerate_examples: degenerate[layer],
        })
        .collect();
    Ok(ContributionProfile { k, seed, examples: traces.len(), layers })
}
