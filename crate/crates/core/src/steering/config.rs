use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assets::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Intervention;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteeringPick {
    pub layer: usize,
    pub index: usize,
    pub coefficient: f32,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SteeringConfig {
    #[serde(default)]
    pub label: String,
    pub interventions: Vec<SteeringPick>,
    /// Refuse to run against a model with a different depth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requires_layers: Option<usize>,
    /// Add the coefficient to the computed one instead of replacing it.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub additive: bool,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ConfigFile {
    List(Vec<SteeringPick>),
    Full(SteeringConfig),
}

const SAFETY_PICKS: &str = include_str!("../../assets/steering/safety_picks.json");

impl SteeringConfig {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Parses either a bare list of `{layer, index, coefficient}` or a full
    /// config object.
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(match serde_json::from_str::<ConfigFile>(text)? {
            ConfigFile::List(interventions) => Self { interventions, ..Self::default() },
            ConfigFile::Full(cfg) => cfg,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::AssetMissing(path.to_path_buf()));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Ten hand-picked GPT-2 medium value vectors whose projections read as
    /// safe or polite language, each set to 3.
    pub fn safety_picks() -> Self {
        Self::from_json(SAFETY_PICKS).expect("bundled config parses")
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if let Some(layers) = self.requires_layers {
            if layers != config.num_layers {
                return Err(Error::Validation(format!(
                    "steering config `{}` targets a {layers}-layer model, got {} layers",
                    self.label, config.num_layers
                )));
            }
        }
        let mut seen = HashSet::new();
        for p in &self.interventions {
            if !p.coefficient.is_finite() {
                return Err(Error::Validation(format!("coefficient for ({}, {}) is not finite", p.layer, p.index)));
            }
            if !seen.insert((p.layer, p.index)) {
                return Err(Error::Validation(format!("({}, {}) appears twice", p.layer, p.index)));
            }
            self.intervention(p).check(config)?;
        }
        Ok(())
    }

    fn intervention(&self, p: &SteeringPick) -> Intervention {
        if self.additive {
            Intervention {
                layer: p.layer,
                value_index: p.index,
                mode: crate::model::InterventionMode::AddCoefficient { delta: p.coefficient },
            }
        } else {
            Intervention::set(p.layer, p.index, p.coefficient)
        }
    }

    pub fn to_interventions(&self) -> Vec<Intervention> {
        self.interventions.iter().map(|p| self.intervention(p)).collect()
    }
}
