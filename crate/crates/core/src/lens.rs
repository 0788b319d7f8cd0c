//! Reading vectors and residual states in vocabulary space.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::model::{Model, ResidualTrace};

/// Default size of a "top tokens" set.
pub const DEFAULT_TOP_K: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct VocabDistribution {
    pub logits: Vec<f32>,
    pub probabilities: Vec<f32>,
}

impl VocabDistribution {
    pub fn from_logits(logits: Vec<f32>) -> Self {
        let probabilities = math::softmax(&logits);
        Self { logits, probabilities }
    }

    /// Top candidate. Ranks are taken on logits, which orders tokens exactly
    /// like the probabilities but without ties caused by underflow.
    pub fn argmax(&self) -> u32 {
        math::argmax(&self.logits) as u32
    }

    /// 1-based rank of `token`.
    pub fn rank_of(&self, token: u32) -> usize {
        math::rank_of(&self.logits, token as usize)
    }
}

/// Scores `E·v` and the token order they induce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRanking {
    pub scores: Vec<f32>,
    /// Token ids by descending score, ties by ascending id.
    pub order: Vec<u32>,
}

impl ProjectionRanking {
    pub fn from_scores(scores: Vec<f32>) -> Self {
        let mut order: Vec<u32> = (0..scores.len() as u32).collect();
        order.sort_unstable_by(|&a, &b| math::rank_order((a as usize, scores[a as usize]), (b as usize, scores[b as usize])));
        Self { scores, order }
    }

    pub fn top(&self, k: usize) -> &[u32] {
        &self.order[..k.min(self.order.len())]
    }

    /// 1-based rank of `token`.
    pub fn rank_of(&self, token: u32) -> Option<usize> {
        self.order.iter().position(|&t| t == token).map(|p| p + 1)
    }
}

fn check_dim(model: &Model, v: &[f32]) -> Result<()> {
    let d = model.config().hidden_dim;
    if v.len() != d {
        return Err(Error::Dimension { layer: None, tensor: "vector".into(), expected: vec![d], found: vec![v.len()] });
    }
    Ok(())
}

/// `E·v`, or `E·LN_f(v)` with the final LayerNorm's gain and bias.
pub fn project_vector(model: &Model, v: &[f32], apply_final_ln: bool) -> Result<ProjectionRanking> {
    check_dim(model, v)?;
    let scores = if apply_final_ln { model.final_logits(v) } else { model.project(v) };
    Ok(ProjectionRanking::from_scores(scores))
}

/// Where in a block a residual state is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadPoint {
    /// `x^ℓ`
    PreFfn,
    /// `x̂^ℓ`
    PostFfn,
    /// The model output `y`; the layer argument is ignored.
    Final,
}

/// How intermediate states are mapped to logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadoutNorm {
    /// `E·x`
    #[default]
    Raw,
    /// `E·LN_f(x)`, the path taken by the model output.
    FinalLn,
}

pub fn logits_at(
    model: &Model,
    trace: &ResidualTrace,
    position: usize,
    layer: usize,
    point: ReadPoint,
    norm: ReadoutNorm,
) -> Result<Vec<f32>> {
    let state = match point {
        ReadPoint::Final => return Ok(trace.final_logits_at(position)?.to_vec()),
        ReadPoint::PreFfn => &trace.record(position, layer)?.pre_ffn,
        ReadPoint::PostFfn => &trace.record(position, layer)?.post_ffn,
    };
    Ok(match norm {
        ReadoutNorm::Raw => model.project(state),
        ReadoutNorm::FinalLn => model.final_logits(state),
    })
}

/// `p^ℓ`, `p̂^ℓ` or `y` at one traced position.
pub fn distribution_at(
    model: &Model,
    trace: &ResidualTrace,
    position: usize,
    layer: usize,
    point: ReadPoint,
    norm: ReadoutNorm,
) -> Result<VocabDistribution> {
    logits_at(model, trace, position, layer, point, norm).map(VocabDistribution::from_logits)
}

/// `e_w · m_i v_i`: the logit shift of token `w` caused by one sub-update.
pub fn subupdate_token_score(model: &Model, layer: usize, index: usize, coefficient: f32, token: u32) -> Result<f32> {
    let w = model.weights();
    let v = w.value_vector(layer, index)?;
    if token as usize >= w.config.vocab_size {
        return Err(Error::Decode { id: token, vocab_size: w.config.vocab_size });
    }
    Ok(coefficient * math::dot(w.embedding(token as usize), v))
}

/// Intersection over union of two id sets.
pub fn iou(a: &[u32], b: &[u32]) -> f64 {
    let a: HashSet<u32> = a.iter().copied().collect();
    let b: HashSet<u32> = b.iter().copied().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorIou {
    pub layer: usize,
    pub index: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LnIouReport {
    pub k: usize,
    pub per_vector: Vec<VectorIou>,
    pub mean_iou: f64,
    pub random_count: usize,
    pub random_seed: u64,
    pub random_mean_iou: f64,
}

/// Rows per chunk when projecting many vectors at once.
const CHUNK: usize = 32;

/// Top-k of `E·v` and `E·LN_f(v)` for each row of `vectors`, as IoU values.
pub fn ln_iou_batch(model: &Model, vectors: &[f32], k: usize) -> Vec<f64> {
    let cfg = model.config();
    let (d, vocab) = (cfg.hidden_dim, cfg.vocab_size);
    let e = model.weights().token_embedding.as_slice();
    let n = vectors.len() / d;
    let mut out = Vec::with_capacity(n);
    let mut raw = vec![0.0f32; CHUNK * vocab];
    let mut normed_scores = vec![0.0f32; CHUNK * vocab];
    let mut normed = vec![0.0f32; CHUNK * d];
    for start in (0..n).step_by(CHUNK) {
        let rows = CHUNK.min(n - start);
        let block = &vectors[start * d..(start + rows) * d];
        for r in 0..rows {
            let ln = model.final_norm(&block[r * d..(r + 1) * d]);
            normed[r * d..(r + 1) * d].copy_from_slice(&ln);
        }
        math::matmul_transposed(block, e, rows, d, vocab, &mut raw[..rows * vocab]);
        math::matmul_transposed(&normed[..rows * d], e, rows, d, vocab, &mut normed_scores[..rows * vocab]);
        for r in 0..rows {
            let top = |s: &[f32]| -> Vec<u32> { math::top_k_indices(s, k).into_iter().map(|i| i as u32).collect() };
            let a = top(&raw[r * vocab..(r + 1) * vocab]);
            let b = top(&normed_scores[r * vocab..(r + 1) * vocab]);
            out.push(iou(&a, &b));
        }
    }
    out
}

/// IoU between the raw and final-LN top-`k` sets over every value vector,
/// with a baseline of `random_count` vectors from [`random_vector_sample`].
pub fn ln_iou_report(model: &Model, k: usize, random_count: usize, seed: u64) -> Result<LnIouReport> {
    let cfg = model.config();
    let mut per_vector = Vec::with_capacity(cfg.num_value_vectors());
    for (layer, lw) in model.weights().layers.iter().enumerate() {
        let ious = ln_iou_batch(model, lw.ffn_values.as_slice(), k);
        per_vector.extend(ious.into_iter().enumerate().map(|(index, iou)| VectorIou { layer, index, iou }));
        log::info!("ln-iou: layer {layer} done");
    }
    let mean_iou = mean(per_vector.iter().map(|v| v.iou));
    let random: Vec<f32> = random_vector_sample(model, random_count, seed).into_iter().flatten().collect();
    let random_mean_iou = if random_count == 0 { 0.0 } else { mean(ln_iou_batch(model, &random, k).into_iter()) };
    Ok(LnIouReport { k, per_vector, mean_iou, random_count, random_seed: seed, random_mean_iou })
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Precomputed top-`k` tokens of `E·v` for every value vector, so token
/// searches need no projection at query time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionIndex {
    pub k: usize,
    pub ffn_dim: usize,
    /// Per layer, `ffn_dim × k` token ids, best first.
    tops: Vec<Vec<u32>>,
}

/// A value vector whose top-`k` contains the queried token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchHit {
    pub layer: usize,
    pub index: usize,
    /// 1-based.
    pub rank: usize,
}

impl ProjectionIndex {
    /// Layers are projected on separate threads.
    pub fn build(model: &Model, k: usize) -> Self {
        let cfg = model.config();
        let (d, vocab, dm) = (cfg.hidden_dim, cfg.vocab_size, cfg.ffn_dim);
        let k = k.min(vocab);
        let e = model.weights().token_embedding.as_slice();
        let tops = std::thread::scope(|s| {
            let handles: Vec<_> = model
                .weights()
                .layers
                .iter()
                .map(|lw| {
                    s.spawn(move || {
                        let values = lw.ffn_values.as_slice();
                        let mut out = Vec::with_capacity(dm * k);
                        let mut scores = vec![0.0f32; CHUNK * vocab];
                        for start in (0..dm).step_by(CHUNK) {
                            let rows = CHUNK.min(dm - start);
                            math::matmul_transposed(&values[start * d..(start + rows) * d], e, rows, d, vocab, &mut scores[..rows * vocab]);
                            for r in 0..rows {
                                out.extend(math::top_k_indices(&scores[r * vocab..(r + 1) * vocab], k).into_iter().map(|t| t as u32));
                            }
                        }
                        out
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("projection thread panicked")).collect()
        });
        Self { k, ffn_dim: dm, tops }
    }

    pub fn num_layers(&self) -> usize {
        self.tops.len()
    }

    pub fn top(&self, layer: usize, index: usize) -> Option<&[u32]> {
        if index >= self.ffn_dim {
            return None;
        }
        self.tops.get(layer).map(|t| &t[index * self.k..(index + 1) * self.k])
    }

    /// Every vector with `token` among its first `k` entries (`k` is capped
    /// at the index size), sorted by rank, then layer, then index.
    pub fn search(&self, token: u32, k: usize) -> Vec<SearchHit> {
        let k = k.min(self.k);
        let mut hits = Vec::new();
        for (layer, tops) in self.tops.iter().enumerate() {
            for (index, row) in tops.chunks_exact(self.k).enumerate() {
                if let Some(p) = row[..k].iter().position(|&t| t == token) {
                    hits.push(SearchHit { layer, index, rank: p + 1 });
                }
            }
        }
        hits.sort_by_key(|h| (h.rank, h.layer, h.index));
        hits
    }
}

/// Per-dimension mean and standard deviation over all value vectors.
pub fn value_vector_moments(model: &Model) -> (Vec<f32>, Vec<f32>) {
    let d = model.config().hidden_dim;
    let mut sum = vec![0.0f64; d];
    let mut sq = vec![0.0f64; d];
    let mut n = 0usize;
    for lw in &model.weights().layers {
        for row in lw.ffn_values.iter_rows() {
            for j in 0..d {
                let x = row[j] as f64;
                sum[j] += x;
                sq[j] += x * x;
            }
            n += 1;
        }
    }
    let n = n as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq.iter().zip(&mean).map(|(q, m)| ((q / n - m * m).max(0.0)).sqrt() as f32).collect();
    (mean.into_iter().map(|m| m as f32).collect(), std)
}

/// `n` vectors drawn from per-dimension normals fitted to the value vectors.
pub fn random_vector_sample(model: &Model, n: usize, seed: u64) -> Vec<Vec<f32>> {
    if n == 0 {
        return Vec::new();
    }
    let (mean, std) = value_vector_moments(model);
    let dists: Vec<Normal<f32>> = mean
        .iter()
        .zip(&std)
        .map(|(&m, &s)| Normal::new(m, s).expect("std is finite and non-negative"))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| dists.iter().map(|dist| dist.sample(&mut rng)).collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_edges() {
        assert_eq!(iou(&[1, 2, 3], &[3, 2, 1]), 1.0);
        assert_eq!(iou(&[1, 2], &[3, 4]), 0.0);
        assert!((iou(&[1, 2, 3], &[2, 3, 4]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ranking_ties_by_id() {
        let r = ProjectionRanking::from_scores(vec![0.0, 1.0, -0.0, 1.0]);
        assert_eq!(r.order, vec![1, 3, 0, 2]);
        assert_eq!(r.rank_of(0), Some(3));
    }
}
