use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Point-wise non-linearity applied to the FFN key activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Tanh approximation used by GPT-2 (`gelu_new`).
    Gelu,
    /// Erf-based GELU.
    GeluExact,
    Relu,
}

impl Activation {
    pub fn from_hf_name(name: &str) -> Result<Self> {
        match name {
            "gelu_new" | "gelu_pytorch_tanh" | "gelu_fast" => Ok(Self::Gelu),
            "gelu" => Ok(Self::GeluExact),
            "relu" => Ok(Self::Relu),
            other => Err(Error::Config(format!("unsupported activation_function `{other}`"))),
        }
    }

    pub fn hf_name(self) -> &'static str {
        match self {
            Self::Gelu => "gelu_new",
            Self::GeluExact => "gelu",
            Self::Relu => "relu",
        }
    }

    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Self::Gelu => crate::math::gelu_tanh(x),
            Self::GeluExact => crate::math::gelu_exact(x),
            Self::Relu => x.max(0.0),
        }
    }
}

/// Dimensions and hyper-parameters of a GPT-2-family checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub num_heads: usize,
    pub max_positions: usize,
    pub activation: Activation,
    pub ln_epsilon: f32,
}

impl ModelConfig {
    /// The 3-layer configuration used throughout the tests.
    pub fn tiny() -> Self {
        Self {
            num_layers: 3,
            hidden_dim: 16,
            ffn_dim: 32,
            vocab_size: 50,
            num_heads: 2,
            max_positions: 64,
            activation: Activation::Gelu,
            ln_epsilon: 1e-5,
        }
    }

    pub fn gpt2_small() -> Self {
        Self {
            num_layers: 12,
            hidden_dim: 768,
            ffn_dim: 3072,
            vocab_size: 50257,
            num_heads: 12,
            max_positions: 1024,
            activation: Activation::Gelu,
            ln_epsilon: 1e-5,
        }
    }

    pub fn gpt2_medium() -> Self {
        Self { num_layers: 24, hidden_dim: 1024, ffn_dim: 4096, num_heads: 16, ..Self::gpt2_small() }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn num_value_vectors(&self) -> usize {
        self.num_layers * self.ffn_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("num_heads", self.num_heads),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.ffn_dim < self.hidden_dim {
            return Err(Error::Config(format!(
                "ffn_dim {} must be at least hidden_dim {}",
                self.ffn_dim, self.hidden_dim
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if !(self.ln_epsilon > 0.0 && self.ln_epsilon.is_finite()) {
            return Err(Error::Config("ln_epsilon must be a small positive real".into()));
        }
        Ok(())
    }

    pub fn from_descriptor(desc: &ConfigDescriptor) -> Result<Self> {
        let cfg = Self {
            num_layers: desc.n_layer,
            hidden_dim: desc.n_embd,
            ffn_dim: desc.n_inner.unwrap_or(4 * desc.n_embd),
            vocab_size: desc.vocab_size,
            num_heads: desc.n_head,
            max_positions: desc.n_positions,
            activation: Activation::from_hf_name(&desc.activation_function)?,
            ln_epsilon: desc.layer_norm_epsilon,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_descriptor(&self) -> ConfigDescriptor {
        ConfigDescriptor {
            n_layer: self.num_layers,
            n_head: self.num_heads,
            n_embd: self.hidden_dim,
            n_inner: Some(self.ffn_dim),
            vocab_size: self.vocab_size,
            n_positions: self.max_positions,
            layer_norm_epsilon: self.ln_epsilon,
            activation_function: self.activation.hf_name().to_string(),
        }
    }
}

/// On-disk `config.json` in the Hugging Face GPT-2 layout. Unknown keys are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigDescriptor {
    pub n_layer: usize,
    pub n_head: usize,
    pub n_embd: usize,
    #[serde(default)]
    pub n_inner: Option<usize>,
    pub vocab_size: usize,
    pub n_positions: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_epsilon: f32,
    #[serde(default = "default_activation")]
    pub activation_function: String,
}

fn default_eps() -> f32 {
    1e-5
}

fn default_activation() -> String {
    "gelu_new".to_string()
}
