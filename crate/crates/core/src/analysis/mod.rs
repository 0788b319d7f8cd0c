//! Sub-update dominance, saturation and elimination events, and score
//! statistics over traced corpora.
//!
//! Corpus-level functions analyse each trace at its last traced position (the
//! next-token prediction site); `example` ids are indices into the trace slice.

mod dominance;
mod events;
mod scores;

pub use dominance::{
    contribution_profile, dominant_subupdates, dominant_subupdates_filtered, ContributionProfile, LayerContribution,
    LayerDominance, SubUpdateRecord,
};
pub use events::{
    detect_elimination, detect_saturation, read_points, EliminationEvent, EventOptions, ReadPoints, SaturationEvent,
    StayTopCheck,
};
pub use scores::{
    event_score_stats, event_score_table, per_layer_top_candidate_scores, EventKind, EventRef, EventScoreMode,
    EventScoreTable, LayerScoreStats, ScoreStats,
};

use crate::error::{Error, Result};
use crate::model::ResidualTrace;

/// Position analysed in a trace: the last traced one.
pub fn analysis_position(trace: &ResidualTrace) -> Result<usize> {
    trace.last_position().ok_or_else(|| Error::MissingTrace("trace has no positions".into()))
}
