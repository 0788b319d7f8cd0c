use serde::{Deserialize, Serialize};

use crate::analysis::analysis_position;
use crate::error::{Error, Result};
use crate::lens::{logits_at, ReadPoint, ReadoutNorm};
use crate::math;
use crate::model::{Model, ResidualTrace};

use super::ClusterModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtremeClusterReport {
    pub threshold: f32,
    pub quantile: f64,
    /// Threshold-passing sub-updates per cluster.
    pub counts: Vec<u64>,
    pub total_hits: u64,
    /// Most frequent clusters (the top `quantile` share of all clusters).
    pub flagged: Vec<u32>,
    /// Share of clustered value vectors that sit in flagged clusters.
    pub flagged_vector_fraction: f64,
}

/// Counts, per cluster, the sub-updates whose score for the layer's top
/// candidate satisfies `|e_w·m_i v_i| > threshold`, and flags the most
/// frequent clusters.
pub fn find_extreme_clusters(
    model: &Model,
    traces: &[ResidualTrace],
    clusters: &ClusterModel,
    threshold: f32,
    quantile: f64,
    norm: ReadoutNorm,
) -> Result<ExtremeClusterReport> {
    if traces.is_empty() {
        return Err(Error::Empty("no traces".into()));
    }
    let cfg = model.config();
    let (d, dm) = (cfg.hidden_dim, cfg.ffn_dim);
    let mut counts = vec![0u64; clusters.num_clusters()];
    let mut static_scores = vec![0.0f32; dm];
    for trace in traces {
        let pos = analysis_position(trace)?;
        for layer in 0..cfg.num_layers {
            let w = math::argmax(&logits_at(model, trace, pos, layer, ReadPoint::PreFfn, norm)?);
            let lw = &model.weights().layers[layer];
            math::matmul_transposed(model.weights().embedding(w), lw.ffn_values.as_slice(), 1, d, dm, &mut static_scores);
            let rec = trace.record(pos, layer)?;
            for (i, m) in rec.coefficients.stored() {
                if (m * static_scores[i]).abs() > threshold {
                    let c = clusters.assign_or_nearest(layer, i, lw.value_vector(i));
                    counts[c as usize] += 1;
                }
            }
        }
    }
    let total_hits = counts.iter().sum();
    let mut ranked: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] > 0).collect();
    ranked.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let quota = (quantile * counts.len() as f64).ceil() as usize;
    let mut flagged: Vec<u32> = ranked.into_iter().take(quota).map(|c| c as u32).collect();
    flagged.sort_unstable();
    let covered: usize = flagged.iter().map(|&c| clusters.counts()[c as usize]).sum();
    let flagged_vector_fraction = if clusters.num_vectors() == 0 { 0.0 } else { covered as f64 / clusters.num_vectors() as f64 };
    Ok(ExtremeClusterReport { threshold, quantile, counts, total_hits, flagged, flagged_vector_fraction })
}
