use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use super::config::{ConfigDescriptor, ModelConfig};
use crate::error::{Error, Result};
use crate::math::Matrix;

pub const WEIGHTS_FILE: &str = "model.safetensors";
pub const CONFIG_FILE: &str = "config.json";

/// Parameters of one transformer block, normalised to a single in-memory convention.
///
/// Projections used as `y = x · W` (`attn_qkv`, `attn_out`) are stored input-major.
/// `ffn_keys` and `ffn_values` are both `d_m × d`: row `i` of `ffn_keys` is the key
/// `k_i` and row `i` of `ffn_values` is the value vector `v_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Vec<f32>,
    pub ln1_bias: Vec<f32>,
    pub attn_qkv: Matrix,
    pub attn_qkv_bias: Vec<f32>,
    pub attn_out: Matrix,
    pub attn_out_bias: Vec<f32>,
    pub ln2_gain: Vec<f32>,
    pub ln2_bias: Vec<f32>,
    pub ffn_keys: Matrix,
    pub ffn_key_bias: Vec<f32>,
    pub ffn_values: Matrix,
    pub ffn_value_bias: Vec<f32>,
}

impl LayerWeights {
    pub fn value_vector(&self, index: usize) -> &[f32] {
        self.ffn_values.row(index)
    }

    pub fn key_vector(&self, index: usize) -> &[f32] {
        self.ffn_keys.row(index)
    }
}

/// All learned tensors of a GPT-2-family checkpoint. The unembedding is tied to
/// `token_embedding`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub token_embedding: Matrix,
    pub position_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_ln_gain: Vec<f32>,
    pub final_ln_bias: Vec<f32>,
}

impl ModelWeights {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn value_vector(&self, layer: usize, index: usize) -> Result<&[f32]> {
        let cfg = &self.config;
        if layer >= cfg.num_layers || index >= cfg.ffn_dim {
            return Err(Error::Index(format!(
                "value vector ({layer}, {index}) outside {}×{}",
                cfg.num_layers, cfg.ffn_dim
            )));
        }
        Ok(self.layers[layer].value_vector(index))
    }

    /// Row `w` of the embedding matrix, `e_w`.
    pub fn embedding(&self, token: usize) -> &[f32] {
        self.token_embedding.row(token)
    }

    /// Checks every tensor shape against the config and rejects non-finite entries.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let (d, dm) = (c.hidden_dim, c.ffn_dim);
        let mat = |layer, name: &str, m: &Matrix, shape: [usize; 2]| check(layer, name, &m.shape(), &shape);
        let vec = |layer, name: &str, v: &[f32], n: usize| check(layer, name, &[v.len()], &[n]);
        mat(None, "wte.weight", &self.token_embedding, [c.vocab_size, d])?;
        mat(None, "wpe.weight", &self.position_embedding, [c.max_positions, d])?;
        if self.layers.len() != c.num_layers {
            return Err(Error::Dimension {
                layer: None,
                tensor: "h".into(),
                expected: vec![c.num_layers],
                found: vec![self.layers.len()],
            });
        }
        for (l, lw) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("h.{l}.{s}");
            let at = Some(l);
            vec(at, &p("ln_1.weight"), &lw.ln1_gain, d)?;
            vec(at, &p("ln_1.bias"), &lw.ln1_bias, d)?;
            mat(at, &p("attn.c_attn.weight"), &lw.attn_qkv, [d, 3 * d])?;
            vec(at, &p("attn.c_attn.bias"), &lw.attn_qkv_bias, 3 * d)?;
            mat(at, &p("attn.c_proj.weight"), &lw.attn_out, [d, d])?;
            vec(at, &p("attn.c_proj.bias"), &lw.attn_out_bias, d)?;
            vec(at, &p("ln_2.weight"), &lw.ln2_gain, d)?;
            vec(at, &p("ln_2.bias"), &lw.ln2_bias, d)?;
            mat(at, &p("mlp.c_fc.weight"), &lw.ffn_keys, [dm, d])?;
            vec(at, &p("mlp.c_fc.bias"), &lw.ffn_key_bias, dm)?;
            mat(at, &p("mlp.c_proj.weight"), &lw.ffn_values, [dm, d])?;
            vec(at, &p("mlp.c_proj.bias"), &lw.ffn_value_bias, d)?;
        }
        vec(None, "ln_f.weight", &self.final_ln_gain, d)?;
        vec(None, "ln_f.bias", &self.final_ln_bias, d)?;
        for (name, data) in self.named_tensors() {
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Corrupt(name));
            }
        }
        Ok(())
    }

    fn named_tensors(&self) -> Vec<(String, &[f32])> {
        let mut out: Vec<(String, &[f32])> = vec![
            ("wte.weight".into(), self.token_embedding.as_slice()),
            ("wpe.weight".into(), self.position_embedding.as_slice()),
        ];
        for (l, lw) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("h.{l}.{s}");
            out.extend([
                (p("ln_1.weight"), lw.ln1_gain.as_slice()),
                (p("ln_1.bias"), lw.ln1_bias.as_slice()),
                (p("attn.c_attn.weight"), lw.attn_qkv.as_slice()),
                (p("attn.c_attn.bias"), lw.attn_qkv_bias.as_slice()),
                (p("attn.c_proj.weight"), lw.attn_out.as_slice()),
                (p("attn.c_proj.bias"), lw.attn_out_bias.as_slice()),
                (p("ln_2.weight"), lw.ln2_gain.as_slice()),
                (p("ln_2.bias"), lw.ln2_bias.as_slice()),
                (p("mlp.c_fc.weight"), lw.ffn_keys.as_slice()),
                (p("mlp.c_fc.bias"), lw.ffn_key_bias.as_slice()),
                (p("mlp.c_proj.weight"), lw.ffn_values.as_slice()),
                (p("mlp.c_proj.bias"), lw.ffn_value_bias.as_slice()),
            ]);
        }
        out.push(("ln_f.weight".into(), self.final_ln_gain.as_slice()));
        out.push(("ln_f.bias".into(), self.final_ln_bias.as_slice()));
        out
    }

    /// Writes `model.safetensors` (Hugging Face GPT-2 naming, Conv1D orientation, f32)
    /// and `config.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let c = &self.config;
        let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (name, data) in self.named_tensors() {
            let (shape, values): (Vec<usize>, Vec<f32>) = match name.as_str() {
                n if n.ends_with("mlp.c_fc.weight") => {
                    let l = layer_of(n);
                    (vec![c.hidden_dim, c.ffn_dim], self.layers[l].ffn_keys.transpose().into_vec())
                }
                "wte.weight" => (vec![c.vocab_size, c.hidden_dim], data.to_vec()),
                "wpe.weight" => (vec![c.max_positions, c.hidden_dim], data.to_vec()),
                n if n.ends_with("attn.c_attn.weight") => (vec![c.hidden_dim, 3 * c.hidden_dim], data.to_vec()),
                n if n.ends_with("attn.c_proj.weight") => (vec![c.hidden_dim, c.hidden_dim], data.to_vec()),
                n if n.ends_with("mlp.c_proj.weight") => (vec![c.ffn_dim, c.hidden_dim], data.to_vec()),
                _ => (vec![data.len()], data.to_vec()),
            };
            let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
            owned.push((name, shape, bytes));
        }
        let views = owned
            .iter()
            .map(|(n, s, b)| TensorView::new(Dtype::F32, s.clone(), b).map(|v| (n.clone(), v)))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(e.to_string()))?;
        safetensors::serialize_to_file(views, None, &dir.join(WEIGHTS_FILE))
            .map_err(|e| Error::Format(e.to_string()))?;
        let desc = serde_json::to_string_pretty(&c.to_descriptor())?;
        std::fs::write(dir.join(CONFIG_FILE), desc)?;
        Ok(())
    }
}

fn layer_of(name: &str) -> usize {
    name.split('.').nth(1).and_then(|s| s.parse().ok()).unwrap_or(0)
}

fn check(layer: Option<usize>, tensor: &str, found: &[usize], expected: &[usize]) -> Result<()> {
    if found != expected {
        return Err(Error::Dimension {
            layer,
            tensor: tensor.to_string(),
            expected: expected.to_vec(),
            found: found.to_vec(),
        });
    }
    Ok(())
}

/// Resolves `path` (a model directory or a `.safetensors` file) to the weight file
/// and its sibling config descriptor.
fn resolve_paths(path: &Path) -> (PathBuf, PathBuf) {
    if path.is_dir() {
        (path.join(WEIGHTS_FILE), path.join(CONFIG_FILE))
    } else {
        let dir = path.parent().unwrap_or(Path::new("."));
        (path.to_path_buf(), dir.join(CONFIG_FILE))
    }
}

/// Loads a GPT-2-family checkpoint. When the config descriptor is absent the
/// dimensions are inferred from tensor shapes.
pub fn load_weights(path: &Path) -> Result<ModelWeights> {
    let (weights_path, config_path) = resolve_paths(path);
    if !weights_path.exists() {
        return Err(Error::AssetMissing(weights_path));
    }
    let bytes = std::fs::read(&weights_path)?;
    let descriptor = if config_path.exists() {
        Some(serde_json::from_slice::<ConfigDescriptor>(&std::fs::read(&config_path)?)?)
    } else {
        None
    };
    load_weights_from_bytes(&bytes, descriptor.as_ref())
}

pub fn load_weights_from_bytes(bytes: &[u8], descriptor: Option<&ConfigDescriptor>) -> Result<ModelWeights> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Format(e.to_string()))?;
    let table = TensorTable::new(&st);
    let config = match descriptor {
        Some(d) => ModelConfig::from_descriptor(d)?,
        None => table.infer_config()?,
    };
    let (d, dm) = (config.hidden_dim, config.ffn_dim);

    let token_embedding = table.matrix(None, "wte.weight", [config.vocab_size, d], false)?;
    if let Some(head) = table.optional("lm_head.weight") {
        let head = to_f32("lm_head.weight", &head)?;
        if head != token_embedding.as_slice() {
            return Err(Error::Config("untied output matrix `lm_head.weight` is not supported".into()));
        }
    }
    let position_embedding = table.matrix(None, "wpe.weight", [config.max_positions, d], false)?;
    let mut layers = Vec::with_capacity(config.num_layers);
    for l in 0..config.num_layers {
        let p = |s: &str| format!("h.{l}.{s}");
        let at = Some(l);
        layers.push(LayerWeights {
            ln1_gain: table.vector(at, &p("ln_1.weight"), d)?,
            ln1_bias: table.vector(at, &p("ln_1.bias"), d)?,
            attn_qkv: table.matrix(at, &p("attn.c_attn.weight"), [d, 3 * d], true)?,
            attn_qkv_bias: table.vector(at, &p("attn.c_attn.bias"), 3 * d)?,
            attn_out: table.matrix(at, &p("attn.c_proj.weight"), [d, d], true)?,
            attn_out_bias: table.vector(at, &p("attn.c_proj.bias"), d)?,
            ln2_gain: table.vector(at, &p("ln_2.weight"), d)?,
            ln2_bias: table.vector(at, &p("ln_2.bias"), d)?,
            // Conv1D stores the key projection input-major (d × d_m); keys are its columns.
            ffn_keys: table.matrix(at, &p("mlp.c_fc.weight"), [dm, d], true)?,
            ffn_key_bias: table.vector(at, &p("mlp.c_fc.bias"), dm)?,
            ffn_values: table.matrix(at, &p("mlp.c_proj.weight"), [dm, d], true)?,
            ffn_value_bias: table.vector(at, &p("mlp.c_proj.bias"), d)?,
        });
    }
    let weights = ModelWeights {
        config,
        token_embedding,
        position_embedding,
        layers,
        final_ln_gain: table.vector(None, "ln_f.weight", d)?,
        final_ln_bias: table.vector(None, "ln_f.bias", d)?,
    };
    weights.validate()?;
    Ok(weights)
}

struct TensorTable<'a> {
    st: &'a SafeTensors<'a>,
    prefix: &'static str,
}

impl<'a> TensorTable<'a> {
    fn new(st: &'a SafeTensors<'a>) -> Self {
        let prefixed = st.names().iter().any(|n| n.starts_with("transformer."));
        Self { st, prefix: if prefixed { "transformer." } else { "" } }
    }

    fn get(&self, name: &str) -> Result<TensorView<'a>> {
        self.st
            .tensor(&format!("{}{name}", self.prefix))
            .or_else(|_| self.st.tensor(name))
            .map_err(|_| Error::TensorAbsent(name.to_string()))
    }

    fn optional(&self, name: &str) -> Option<TensorView<'a>> {
        self.st.tensor(name).ok()
    }

    fn vector(&self, layer: Option<usize>, name: &str, n: usize) -> Result<Vec<f32>> {
        let view = self.get(name)?;
        check(layer, name, view.shape(), &[n])?;
        to_f32(name, &view)
    }

    /// Reads a matrix into `target` (rows × cols). When `transposable`, a tensor
    /// stored in the opposite orientation is transposed; square tensors are assumed
    /// to use the Conv1D (input-major) layout, which for keys means a transpose.
    fn matrix(&self, layer: Option<usize>, name: &str, target: [usize; 2], transposable: bool) -> Result<Matrix> {
        let view = self.get(name)?;
        let shape = view.shape().to_vec();
        let data = to_f32(name, &view)?;
        let is_keys = name.ends_with("mlp.c_fc.weight");
        let flipped = [target[1], target[0]];
        if is_keys {
            // on-disk Conv1D layout is d × d_m
            if shape == flipped {
                return Ok(Matrix::from_vec(shape[0], shape[1], data).transpose());
            }
            if shape == target && target[0] != target[1] {
                return Ok(Matrix::from_vec(target[0], target[1], data));
            }
        } else {
            if shape == target {
                return Ok(Matrix::from_vec(target[0], target[1], data));
            }
            if transposable && shape == flipped {
                return Ok(Matrix::from_vec(shape[0], shape[1], data).transpose());
            }
        }
        Err(Error::Dimension { layer, tensor: name.to_string(), expected: flipped_if(is_keys, target), found: shape })
    }

    fn infer_config(&self) -> Result<ModelConfig> {
        let wte = self.get("wte.weight")?;
        let wpe = self.get("wpe.weight")?;
        let fc = self.get("h.0.mlp.c_fc.weight")?;
        let mut num_layers = 0;
        while self.get(&format!("h.{num_layers}.ln_1.weight")).is_ok() {
            num_layers += 1;
        }
        let [vocab_size, hidden_dim] = dims2("wte.weight", wte.shape())?;
        let [max_positions, _] = dims2("wpe.weight", wpe.shape())?;
        let fc_shape = dims2("h.0.mlp.c_fc.weight", fc.shape())?;
        let ffn_dim = if fc_shape[0] == hidden_dim { fc_shape[1] } else { fc_shape[0] };
        let cfg = ModelConfig {
            num_layers,
            hidden_dim,
            ffn_dim,
            vocab_size,
            num_heads: (hidden_dim / 64).max(1),
            max_positions,
            activation: super::config::Activation::Gelu,
            ln_epsilon: 1e-5,
        };
        log::warn!("no config descriptor; inferred {cfg:?} (num_heads assumes 64-dim heads)");
        cfg.validate()?;
        Ok(cfg)
    }
}

fn flipped_if(flip: bool, s: [usize; 2]) -> Vec<usize> {
    if flip {
        vec![s[1], s[0]]
    } else {
        s.to_vec()
    }
}

fn dims2(name: &str, shape: &[usize]) -> Result<[usize; 2]> {
    match shape {
        [a, b] => Ok([*a, *b]),
        other => Err(Error::Dimension { layer: None, tensor: name.into(), expected: vec![0, 0], found: other.to_vec() }),
    }
}

fn to_f32(name: &str, view: &TensorView<'_>) -> Result<Vec<f32>> {
    let raw = view.data();
    let out: Vec<f32> = match view.dtype() {
        Dtype::F32 => raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect(),
        Dtype::F16 => raw
            .chunks_exact(2)
            .map(|b| half::f16::from_le_bytes([b[0], b[1]]).to_f32())
            .collect(),
        Dtype::BF16 => raw
            .chunks_exact(2)
            .map(|b| half::bf16::from_le_bytes([b[0], b[1]]).to_f32())
            .collect(),
        other => return Err(Error::Format(format!("tensor `{name}` has unsupported dtype {other:?}"))),
    };
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Corrupt(name.to_string()));
    }
    Ok(out)
}

/// Summary used by `assets validate`.
pub fn describe(weights: &ModelWeights) -> BTreeMap<&'static str, usize> {
    let c = &weights.config;
    BTreeMap::from([
        ("n_layer", c.num_layers),
        ("n_embd", c.hidden_dim),
        ("n_inner", c.ffn_dim),
        ("vocab_size", c.vocab_size),
        ("n_head", c.num_heads),
        ("n_positions", c.max_positions),
        ("value_vectors", c.num_value_vectors()),
    ])
}
