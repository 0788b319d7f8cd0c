use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::lens::{logits_at, ReadPoint, ReadoutNorm};
use crate::math;
use crate::model::{Model, ResidualTrace};

/// Which read points must keep the reference token on top after saturation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StayTopCheck {
    /// Both `p^ℓ` and `p̂^ℓ` of every later layer.
    #[default]
    BothPoints,
    /// Only `p̂^ℓ`.
    PostOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EventOptions {
    pub norm: ReadoutNorm,
    pub stay_top: StayTopCheck,
}

/// Top candidates and elimination ranks at every read point of one position.
/// The post-FFN point of the last layer is the model output `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadPoints {
    pub position: usize,
    /// `argmax(p^ℓ)`
    pub pre_top: Vec<u32>,
    /// `argmax(p̂^ℓ)`
    pub post_top: Vec<u32>,
    /// Rank of `argmax(p^ℓ)` in `p̂^ℓ`.
    pub pre_top_rank_after: Vec<usize>,
    /// `argmax(y)`
    pub final_top: u32,
}

pub fn read_points(model: &Model, trace: &ResidualTrace, position: usize, norm: ReadoutNorm) -> Result<ReadPoints> {
    let layers = model.config().num_layers;
    let mut rp = ReadPoints {
        position,
        pre_top: Vec::with_capacity(layers),
        post_top: Vec::with_capacity(layers),
        pre_top_rank_after: Vec::with_capacity(layers),
        final_top: math::argmax(trace.final_logits_at(position)?) as u32,
    };
    for layer in 0..layers {
        let pre = logits_at(model, trace, position, layer, ReadPoint::PreFfn, norm)?;
        let point = if layer + 1 == layers { ReadPoint::Final } else { ReadPoint::PostFfn };
        let post = logits_at(model, trace, position, layer, point, norm)?;
        let top = math::argmax(&pre);
        rp.pre_top.push(top as u32);
        rp.post_top.push(math::argmax(&post) as u32);
        rp.pre_top_rank_after.push(math::rank_of(&post, top));
    }
    Ok(rp)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaturationEvent {
    pub example: usize,
    pub position: usize,
    pub layer: usize,
    /// `argmax(y)`
    pub reference_token: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EliminationEvent {
    pub example: usize,
    pub position: usize,
    pub layer: usize,
    /// `argmax(p^ℓ)`
    pub reference_token: u32,
    pub rank_before: usize,
    pub rank_after: usize,
}

/// Earliest FFN update after which `argmax(y)` stays on top, when it happens
/// before the last layer and the FFN itself flipped the top candidate.
pub fn detect_saturation(example: usize, points: &ReadPoints, check: StayTopCheck) -> Option<SaturationEvent> {
    let w = points.final_top;
    let layers = points.post_top.len();
    // walk the read points backwards while w stays on top
    let mut start = layers;
    for layer in (0..layers).rev() {
        if points.post_top[layer] != w {
            break;
        }
        start = layer;
        if check == StayTopCheck::BothPoints && points.pre_top[layer] != w {
            break;
        }
    }
    if start >= layers.saturating_sub(1) || points.pre_top[start] == w {
        return None;
    }
    Some(SaturationEvent { example, position: points.position, layer: start, reference_token: w })
}

/// FFN update that pushes the current top candidate furthest down, when it
/// ends below rank 1. Ties go to the earliest layer.
pub fn detect_elimination(example: usize, points: &ReadPoints) -> Option<EliminationEvent> {
    let mut best: Option<usize> = None;
    for (layer, &rank) in points.pre_top_rank_after.iter().enumerate() {
        if rank > 1 && best.is_none_or(|b| rank > points.pre_top_rank_after[b]) {
            best = Some(layer);
        }
    }
    best.map(|layer| EliminationEvent {
        example,
        position: points.position,
        layer,
        reference_token: points.pre_top[layer],
        rank_before: 1,
        rank_after: points.pre_top_rank_after[layer],
    })
}
