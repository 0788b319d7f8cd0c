use crate::assets::{ModelConfig, ModelWeights};
use crate::error::{Error, Result};
use crate::math::{self, Matrix};

use super::options::{CoefficientStorage, ForwardOptions, Intervention, InterventionPlan, TracePositions};
use super::trace::{Coefficients, LayerRecord, ResidualTrace};

/// Immutable GPT-2 model: weights plus cached value-vector norms. Safe to share
/// across threads.
#[derive(Debug, Clone)]
pub struct Model {
    weights: ModelWeights,
    value_norms: Vec<Vec<f32>>,
}

/// Result of [`Model::ffn_apply`].
#[derive(Debug, Clone, PartialEq)]
pub struct FfnOutput {
    /// `o = mᵀW_V + b_V`.
    pub output: Vec<f32>,
    /// `m = f(LN2(x)·W_Kᵀ + b_K)` after interventions.
    pub coefficients: Vec<f32>,
    /// `Σ_i m_i v_i` (the output without `b_V`).
    pub update: Vec<f32>,
}

pub struct ForwardOutput {
    /// One row of `|V|` logits per position.
    pub logits: Matrix,
    pub trace: Option<ResidualTrace>,
}

/// Per-layer attention keys and values for incremental decoding.
#[derive(Debug, Clone)]
pub struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

impl KvCache {
    pub fn new(num_layers: usize) -> Self {
        Self { keys: vec![Vec::new(); num_layers], values: vec![Vec::new(); num_layers], len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl Model {
    pub fn new(weights: ModelWeights) -> Self {
        let value_norms = weights
            .layers
            .iter()
            .map(|l| l.ffn_values.iter_rows().map(math::norm).collect())
            .collect();
        Self { weights, value_norms }
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn config(&self) -> &ModelConfig {
        &self.weights.config
    }

    /// `‖v_i^ℓ‖` for every value vector of `layer`.
    pub fn value_norms(&self, layer: usize) -> &[f32] {
        &self.value_norms[layer]
    }

    pub fn forward(&self, ids: &[u32], options: &ForwardOptions) -> Result<ForwardOutput> {
        let mut cache = KvCache::new(self.config().num_layers);
        self.forward_incremental(&mut cache, ids, options)
    }

    /// Runs `ids` as positions `cache.len()..` and returns logits for those positions.
    pub fn forward_incremental(&self, cache: &mut KvCache, ids: &[u32], options: &ForwardOptions) -> Result<ForwardOutput> {
        let cfg = self.config();
        options.validate(cfg)?;
        let start = cache.len;
        let total = start + ids.len();
        if total > cfg.max_positions {
            return Err(Error::SequenceTooLong { len: total, max: cfg.max_positions });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(Error::Index(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        let (n, d, dm) = (ids.len(), cfg.hidden_dim, cfg.ffn_dim);
        let plan = InterventionPlan::new(cfg.num_layers, &options.interventions);

        let w = &self.weights;
        let mut h = vec![0.0f32; n * d];
        for (i, &id) in ids.iter().enumerate() {
            let (tok, pos) = (w.token_embedding.row(id as usize), w.position_embedding.row(start + i));
            for j in 0..d {
                h[i * d + j] = tok[j] + pos[j];
            }
        }

        let traced: Vec<usize> = match (options.trace_enabled, options.trace_positions) {
            (false, _) => Vec::new(),
            (true, TracePositions::All) => (0..n).collect(),
            (true, TracePositions::Last) => n.checked_sub(1).into_iter().collect(),
        };
        let mut records: Vec<Vec<LayerRecord>> = vec![Vec::with_capacity(cfg.num_layers); traced.len()];

        let mut normed = vec![0.0f32; n * d];
        let mut qkv = vec![0.0f32; n * 3 * d];
        let mut attn = vec![0.0f32; n * d];
        let mut proj = vec![0.0f32; n * d];
        let mut coeffs = vec![0.0f32; n * dm];
        let mut update = vec![0.0f32; n * d];
        for (l, lw) in w.layers.iter().enumerate() {
            for i in 0..n {
                let row = i * d..(i + 1) * d;
                math::layer_norm(&h[row.clone()], &lw.ln1_gain, &lw.ln1_bias, cfg.ln_epsilon, &mut normed[row]);
            }
            math::matmul(&normed, lw.attn_qkv.as_slice(), n, d, 3 * d, &mut qkv);
            for i in 0..n {
                for (v, b) in qkv[i * 3 * d..(i + 1) * 3 * d].iter_mut().zip(&lw.attn_qkv_bias) {
                    *v += b;
                }
            }
            self.attend(cache, l, start, n, &qkv, &mut attn);
            math::matmul(&attn, lw.attn_out.as_slice(), n, d, d, &mut proj);
            for i in 0..n {
                for j in 0..d {
                    h[i * d + j] += proj[i * d + j] + lw.attn_out_bias[j];
                }
            }

            // h now holds x^ℓ
            for i in 0..n {
                let row = i * d..(i + 1) * d;
                math::layer_norm(&h[row.clone()], &lw.ln2_gain, &lw.ln2_bias, cfg.ln_epsilon, &mut normed[row]);
            }
            math::matmul_transposed(&normed, lw.ffn_keys.as_slice(), n, d, dm, &mut coeffs);
            for i in 0..n {
                let row = &mut coeffs[i * dm..(i + 1) * dm];
                for (m, b) in row.iter_mut().zip(&lw.ffn_key_bias) {
                    *m = cfg.activation.apply(*m + b);
                }
                plan.apply(l, row);
            }
            math::matmul(&coeffs, lw.ffn_values.as_slice(), n, dm, d, &mut update);
            for (slot, &i) in traced.iter().enumerate() {
                let row = i * d..(i + 1) * d;
                let pre = h[row.clone()].to_vec();
                let out: Vec<f32> = update[row].iter().zip(&lw.ffn_value_bias).map(|(u, b)| u + b).collect();
                let post: Vec<f32> = pre.iter().zip(&out).map(|(x, o)| x + o).collect();
                let m = &coeffs[i * dm..(i + 1) * dm];
                records[slot].push(LayerRecord {
                    pre_ffn: pre,
                    ffn_output: out,
                    post_ffn: post,
                    coefficients: self.store_coefficients(l, m, options.coefficient_storage),
                });
            }
            for i in 0..n {
                for j in 0..d {
                    let o = update[i * d + j] + lw.ffn_value_bias[j];
                    h[i * d + j] += o;
                }
            }
            if h.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericInstability { layer: l });
            }
        }
        cache.len = total;

        let logits = self.unembed(&h, n);
        let trace = options.trace_enabled.then(|| ResidualTrace {
            token_ids: ids.to_vec(),
            positions: traced.iter().map(|&i| start + i).collect(),
            final_logits: traced.iter().map(|&i| logits.row(i).to_vec()).collect(),
            layers: records,
        });
        Ok(ForwardOutput { logits, trace })
    }

    fn attend(&self, cache: &mut KvCache, layer: usize, start: usize, n: usize, qkv: &[f32], out: &mut [f32]) {
        let cfg = self.config();
        let (d, heads) = (cfg.hidden_dim, cfg.num_heads);
        let hd = d / heads;
        let keys = &mut cache.keys[layer];
        let values = &mut cache.values[layer];
        keys.truncate(start * d);
        values.truncate(start * d);
        for i in 0..n {
            let row = &qkv[i * 3 * d..(i + 1) * 3 * d];
            keys.extend_from_slice(&row[d..2 * d]);
            values.extend_from_slice(&row[2 * d..3 * d]);
        }
        let scale = 1.0 / (hd as f32).sqrt();
        let mut scores = Vec::with_capacity(start + n);
        for i in 0..n {
            let pos = start + i;
            let q = &qkv[i * 3 * d..i * 3 * d + d];
            for hh in 0..heads {
                let qh = &q[hh * hd..(hh + 1) * hd];
                scores.clear();
                // causal: attend to positions 0..=pos
                for j in 0..=pos {
                    let kj = &keys[j * d + hh * hd..j * d + (hh + 1) * hd];
                    scores.push(math::dot(qh, kj) * scale);
                }
                let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut z = 0.0f32;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let o = &mut out[i * d + hh * hd..i * d + (hh + 1) * hd];
                o.fill(0.0);
                for (j, &s) in scores.iter().enumerate() {
                    let p = s / z;
                    let vj = &values[j * d + hh * hd..j * d + (hh + 1) * hd];
                    for t in 0..hd {
                        o[t] += p * vj[t];
                    }
                }
            }
        }
    }

    fn unembed(&self, h: &[f32], n: usize) -> Matrix {
        let cfg = self.config();
        let d = cfg.hidden_dim;
        let mut normed = vec![0.0f32; n * d];
        for i in 0..n {
            let row = i * d..(i + 1) * d;
            self.final_norm_into(&h[row.clone()], &mut normed[row]);
        }
        let mut logits = vec![0.0f32; n * cfg.vocab_size];
        math::matmul_transposed(&normed, self.weights.token_embedding.as_slice(), n, d, cfg.vocab_size, &mut logits);
        Matrix::from_vec(n, cfg.vocab_size, logits)
    }

    /// Final LayerNorm with the learned gain and bias.
    pub fn final_norm(&self, x: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; x.len()];
        self.final_norm_into(x, &mut out);
        out
    }

    fn final_norm_into(&self, x: &[f32], out: &mut [f32]) {
        let w = &self.weights;
        math::layer_norm(x, &w.final_ln_gain, &w.final_ln_bias, w.config.ln_epsilon, out);
    }

    /// `E · v` for an arbitrary `d`-vector.
    pub fn project(&self, v: &[f32]) -> Vec<f32> {
        let cfg = self.config();
        let mut out = vec![0.0; cfg.vocab_size];
        math::matmul_transposed(v, self.weights.token_embedding.as_slice(), 1, cfg.hidden_dim, cfg.vocab_size, &mut out);
        out
    }

    /// Logits `E · LN_f(x)` as computed at the end of `forward`.
    pub fn final_logits(&self, x: &[f32]) -> Vec<f32> {
        self.project(&self.final_norm(x))
    }

    /// The FFN block of `layer` applied to a single residual state `x`.
    pub fn ffn_apply(&self, x: &[f32], layer: usize, interventions: &[Intervention]) -> Result<FfnOutput> {
        let cfg = self.config();
        if layer >= cfg.num_layers {
            return Err(Error::Index(format!("layer {layer} outside 0..{}", cfg.num_layers)));
        }
        if x.len() != cfg.hidden_dim {
            return Err(Error::Validation(format!("state has {} dims, model has {}", x.len(), cfg.hidden_dim)));
        }
        for iv in interventions {
            iv.check(cfg)?;
        }
        let lw = &self.weights.layers[layer];
        let (d, dm) = (cfg.hidden_dim, cfg.ffn_dim);
        let mut normed = vec![0.0; d];
        math::layer_norm(x, &lw.ln2_gain, &lw.ln2_bias, cfg.ln_epsilon, &mut normed);
        let mut coefficients = vec![0.0; dm];
        math::matmul_transposed(&normed, lw.ffn_keys.as_slice(), 1, d, dm, &mut coefficients);
        for (m, b) in coefficients.iter_mut().zip(&lw.ffn_key_bias) {
            *m = cfg.activation.apply(*m + b);
        }
        for iv in interventions.iter().filter(|iv| iv.layer == layer) {
            let m = &mut coefficients[iv.value_index];
            *m = iv.apply(*m);
        }
        let mut update = vec![0.0; d];
        math::matmul(&coefficients, lw.ffn_values.as_slice(), 1, dm, d, &mut update);
        let output = update.iter().zip(&lw.ffn_value_bias).map(|(u, b)| u + b).collect();
        Ok(FfnOutput { output, coefficients, update })
    }

    fn store_coefficients(&self, layer: usize, m: &[f32], storage: CoefficientStorage) -> Coefficients {
        match storage {
            CoefficientStorage::Full => Coefficients::Full(m.to_vec()),
            CoefficientStorage::TopK(k) => {
                let norms = &self.value_norms[layer];
                let weights: Vec<f32> = m.iter().zip(norms).map(|(c, n)| c.abs() * n).collect();
                let entries = math::top_k_indices(&weights, k).into_iter().map(|i| (i as u32, m[i])).collect();
                Coefficients::Sparse { dim: m.len(), entries }
            }
        }
    }
}
