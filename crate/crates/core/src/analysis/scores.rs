use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lens::{logits_at, ReadPoint, ReadoutNorm};
use crate::math;
use crate::model::{Model, ResidualTrace};

use super::dominance::dominant_subupdates_filtered;
use super::events::{EliminationEvent, SaturationEvent};
use super::analysis_position;

/// Per-event max, mean and min of token scores, averaged across events.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub max: f64,
    pub mean: f64,
    pub min: f64,
    /// Mean of `|score|`, averaged the same way.
    pub mean_abs: f64,
    pub count: usize,
}

#[derive(Default)]
struct StatsAccumulator {
    max: f64,
    mean: f64,
    min: f64,
    mean_abs: f64,
    count: usize,
}

impl StatsAccumulator {
    fn push(&mut self, scores: &[f64]) {
        if scores.is_empty() {
            return;
        }
        let n = scores.len() as f64;
        self.max += scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        self.min += scores.iter().copied().fold(f64::INFINITY, f64::min);
        self.mean += scores.iter().sum::<f64>() / n;
        self.mean_abs += scores.iter().map(|s| s.abs()).sum::<f64>() / n;
        self.count += 1;
    }

    fn finish(self) -> Option<ScoreStats> {
        (self.count > 0).then(|| {
            let n = self.count as f64;
            ScoreStats { max: self.max / n, mean: self.mean / n, min: self.min / n, mean_abs: self.mean_abs / n, count: self.count }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EventScoreMode {
    Dominant { k: usize },
    /// `k` indices drawn without replacement, scored with their real coefficients.
    Random { k: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Saturation,
    Elimination,
}

/// The parts of an event needed for scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRef {
    pub example: usize,
    pub position: usize,
    pub layer: usize,
    pub token: u32,
}

impl From<&SaturationEvent> for EventRef {
    fn from(e: &SaturationEvent) -> Self {
        Self { example: e.example, position: e.position, layer: e.layer, token: e.reference_token }
    }
}

impl From<&EliminationEvent> for EventRef {
    fn from(e: &EliminationEvent) -> Self {
        Self { example: e.example, position: e.position, layer: e.layer, token: e.reference_token }
    }
}

fn token_scores(model: &Model, layer: usize, token: u32, picks: &[(usize, f32)]) -> Vec<f64> {
    let e = model.weights().embedding(token as usize);
    let lw = &model.weights().layers[layer];
    picks.iter().map(|&(i, m)| (m * math::dot(e, lw.value_vector(i))) as f64).collect()
}

/// Scores `e_w·m_i v_i` of the reference token for `k` sub-updates at each
/// event's layer, summarised per event and averaged.
pub fn event_score_stats(model: &Model, traces: &[ResidualTrace], events: &[EventRef], mode: EventScoreMode) -> Result<ScoreStats> {
    if events.is_empty() {
        return Err(Error::Empty("no events to score".into()));
    }
    let dm = model.config().ffn_dim;
    let mut rng = match mode {
        EventScoreMode::Random { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        EventScoreMode::Dominant { .. } => None,
    };
    let mut acc = StatsAccumulator::default();
    for ev in events {
        let trace = traces
            .get(ev.example)
            .ok_or_else(|| Error::MissingTrace(format!("no trace for example {}", ev.example)))?;
        let picks: Vec<(usize, f32)> = match (mode, rng.as_mut()) {
            (EventScoreMode::Random { k, .. }, Some(rng)) => {
                if k > dm {
                    return Err(Error::Index(format!("k = {k} exceeds {dm}")));
                }
                let rec = trace.record(ev.position, ev.layer)?;
                sample(rng, dm, k).into_iter().map(|i| (i, rec.coefficients.get(i))).collect()
            }
            (EventScoreMode::Dominant { k }, _) | (EventScoreMode::Random { k, .. }, None) => {
                dominant_subupdates_filtered(model, trace, ev.position, ev.layer, k, |_, _| false)?
                    .records
                    .iter()
                    .map(|r| (r.index, r.coefficient))
                    .collect()
            }
        };
        acc.push(&token_scores(model, ev.layer, ev.token, &picks));
    }
    Ok(acc.finish().expect("at least one event"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeStats {
    pub dominant: Option<ScoreStats>,
    pub random: Option<ScoreStats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventScoreTable {
    pub k: usize,
    pub seed: u64,
    pub saturation_events: usize,
    pub elimination_events: usize,
    pub saturation: ModeStats,
    pub elimination: ModeStats,
}

pub fn event_score_table(
    model: &Model,
    traces: &[ResidualTrace],
    saturation: &[SaturationEvent],
    elimination: &[EliminationEvent],
    k: usize,
    seed: u64,
) -> Result<EventScoreTable> {
    let stats = |refs: Vec<EventRef>| -> Result<ModeStats> {
        if refs.is_empty() {
            return Ok(ModeStats { dominant: None, random: None });
        }
        Ok(ModeStats {
            dominant: Some(event_score_stats(model, traces, &refs, EventScoreMode::Dominant { k })?),
            random: Some(event_score_stats(model, traces, &refs, EventScoreMode::Random { k, seed })?),
        })
    };
    Ok(EventScoreTable {
        k,
        seed,
        saturation_events: saturation.len(),
        elimination_events: elimination.len(),
        saturation: stats(saturation.iter().map(EventRef::from).collect())?,
        elimination: stats(elimination.iter().map(EventRef::from).collect())?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScoreStats {
    pub layer: usize,
    /// `None` when no sub-update was eligible in any example.
    pub stats: Option<ScoreStats>,
}

/// Per layer, scores of `w^ℓ = argmax(p^ℓ)` over the top-k dominant
/// sub-updates that `exclude` lets through.
pub fn per_layer_top_candidate_scores(
    model: &Model,
    traces: &[ResidualTrace],
    k: usize,
    norm: ReadoutNorm,
    exclude: impl Fn(usize, usize) -> bool,
) -> Result<Vec<LayerScoreStats>> {
    let layers = model.config().num_layers;
    let mut acc: Vec<StatsAccumulator> = (0..layers).map(|_| StatsAccumulator::default()).collect();
    for trace in traces {
        let pos = analysis_position(trace)?;
        for (layer, a) in acc.iter_mut().enumerate() {
            let w = math::argmax(&logits_at(model, trace, pos, layer, ReadPoint::PreFfn, norm)?) as u32;
            let dom = dominant_subupdates_filtered(model, trace, pos, layer, k, &exclude)?;
            let picks: Vec<(usize, f32)> = dom.records.iter().map(|r| (r.index, r.coefficient)).collect();
            a.push(&token_scores(model, layer, w, &picks));
        }
    }
    Ok(acc.into_iter().enumerate().map(|(layer, a)| LayerScoreStats { layer, stats: a.finish() }).collect())
}
