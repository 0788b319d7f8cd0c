use serde::{Deserialize, Serialize};

use crate::assets::ModelConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum InterventionMode {
    /// Replace the computed coefficient.
    SetCoefficient { value: f32 },
    Zero,
    /// Add to the computed coefficient (exploration only).
    AddCoefficient { delta: f32 },
}

/// Overrides the coefficient `m_i` of one value vector at every position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub layer: usize,
    pub value_index: usize,
    #[serde(flatten)]
    pub mode: InterventionMode,
}

impl Intervention {
    pub fn set(layer: usize, value_index: usize, value: f32) -> Self {
        Self { layer, value_index, mode: InterventionMode::SetCoefficient { value } }
    }

    pub fn zero(layer: usize, value_index: usize) -> Self {
        Self { layer, value_index, mode: InterventionMode::Zero }
    }

    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.layer >= config.num_layers || self.value_index >= config.ffn_dim {
            return Err(Error::Index(format!(
                "intervention on ({}, {}) outside {}×{}",
                self.layer, self.value_index, config.num_layers, config.ffn_dim
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, m: f32) -> f32 {
        match self.mode {
            InterventionMode::SetCoefficient { value } => value,
            InterventionMode::Zero => 0.0,
            InterventionMode::AddCoefficient { delta } => m + delta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientStorage {
    #[default]
    Full,
    /// Keep only the `K` entries with the largest `|m_i|·‖v_i‖`.
    TopK(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TracePositions {
    #[default]
    All,
    Last,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    pub trace_enabled: bool,
    pub coefficient_storage: CoefficientStorage,
    pub trace_positions: TracePositions,
    pub interventions: Vec<Intervention>,
    /// Additive logit offsets applied before each decoding step of generation.
    /// `forward` itself returns unmasked logits.
    pub logit_mask: Option<Vec<f32>>,
}

impl ForwardOptions {
    pub fn traced() -> Self {
        Self { trace_enabled: true, ..Self::default() }
    }

    pub fn with_interventions(mut self, interventions: Vec<Intervention>) -> Self {
        self.interventions = interventions;
        self
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if let CoefficientStorage::TopK(0) = self.coefficient_storage {
            return Err(Error::Validation("top_k coefficient storage requires K >= 1".into()));
        }
        for iv in &self.interventions {
            iv.check(config)?;
        }
        if let Some(mask) = &self.logit_mask {
            if mask.len() != config.vocab_size {
                return Err(Error::Validation(format!(
                    "logit mask has {} entries, vocabulary has {}",
                    mask.len(),
                    config.vocab_size
                )));
            }
        }
        Ok(())
    }
}

/// Interventions grouped per layer, applied in list order.
#[derive(Debug, Clone, Default)]
pub(crate) struct InterventionPlan {
    per_layer: Vec<Vec<Intervention>>,
}

impl InterventionPlan {
    pub fn new(num_layers: usize, interventions: &[Intervention]) -> Self {
        let mut per_layer = vec![Vec::new(); num_layers];
        for iv in interventions {
            per_layer[iv.layer].push(*iv);
        }
        Self { per_layer }
    }

    pub fn apply(&self, layer: usize, coefficients: &mut [f32]) {
        for iv in &self.per_layer[layer] {
            let m = &mut coefficients[iv.value_index];
            *m = iv.apply(*m);
        }
    }
}
