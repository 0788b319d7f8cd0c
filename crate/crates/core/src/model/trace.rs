use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// FFN coefficients `m^ℓ` of one position, stored densely or as the top-K
/// entries by `|m_i|·‖v_i‖`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coefficients {
    Full(Vec<f32>),
    Sparse { dim: usize, entries: Vec<(u32, f32)> },
}

impl Coefficients {
    pub fn dim(&self) -> usize {
        match self {
            Self::Full(v) => v.len(),
            Self::Sparse { dim, .. } => *dim,
        }
    }

    pub fn full(&self) -> Option<&[f32]> {
        match self {
            Self::Full(v) => Some(v),
            Self::Sparse { .. } => None,
        }
    }

    /// Coefficient of `index` (0 when a sparse record omits it).
    pub fn get(&self, index: usize) -> f32 {
        match self {
            Self::Full(v) => v[index],
            Self::Sparse { entries, .. } => {
                entries.iter().find(|(i, _)| *i as usize == index).map_or(0.0, |(_, m)| *m)
            }
        }
    }

    /// `(index, m_i)` for every stored entry, in index order for dense storage.
    pub fn stored(&self) -> Vec<(usize, f32)> {
        match self {
            Self::Full(v) => v.iter().copied().enumerate().collect(),
            Self::Sparse { entries, .. } => entries.iter().map(|&(i, m)| (i as usize, m)).collect(),
        }
    }
}

/// State of one position around one FFN block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    /// `x^ℓ`: the residual stream entering the FFN (before its LayerNorm).
    pub pre_ffn: Vec<f32>,
    /// `o^ℓ`, including the output bias `b_V`.
    pub ffn_output: Vec<f32>,
    /// `x̂^ℓ = x^ℓ + o^ℓ`.
    pub post_ffn: Vec<f32>,
    pub coefficients: Coefficients,
}

/// Instrumented record of one forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualTrace {
    pub token_ids: Vec<u32>,
    /// Sequence positions that were traced, ascending.
    pub positions: Vec<usize>,
    /// `layers[p][ℓ]` for the p-th traced position.
    pub layers: Vec<Vec<LayerRecord>>,
    /// Final logits per traced position.
    pub final_logits: Vec<Vec<f32>>,
}

impl ResidualTrace {
    pub fn num_layers(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    pub fn last_position(&self) -> Option<usize> {
        self.positions.last().copied()
    }

    fn slot(&self, position: usize) -> Result<usize> {
        self.positions
            .binary_search(&position)
            .map_err(|_| Error::MissingTrace(format!("position {position} was not traced")))
    }

    pub fn record(&self, position: usize, layer: usize) -> Result<&LayerRecord> {
        let slot = self.slot(position)?;
        self.layers[slot]
            .get(layer)
            .ok_or_else(|| Error::MissingTrace(format!("layer {layer} at position {position}")))
    }

    pub fn final_logits_at(&self, position: usize) -> Result<&[f32]> {
        Ok(&self.final_logits[self.slot(position)?])
    }
}
