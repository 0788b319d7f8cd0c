//! Controlled generation: coefficient overrides, a word-filter baseline,
//! toxicity scoring and perplexity.

mod config;
mod filter;
mod generation;
mod perplexity;
mod prompts;
mod toxicity;

pub use config::{SteeringConfig, SteeringPick};
pub use filter::{Completion, FilterProcessor, WordFilter};
pub use generation::{
    concept_tokens, generation_mass, steer_generate, steer_prompts, word_filter_generate, GenerationResult, PromptOutcome,
    SteeringReport,
};
pub use perplexity::{perplexity, PerplexityReport};
pub use prompts::{bundled_prompts, load_prompts, parse_prompts, DEFAULT_TEXT_POINTER};
pub use toxicity::{
    HttpScorer, ScoreSource, ToxicityScore, ToxicityScorer, WordlistScorer, ATTRIBUTES, SCORER_KEY_ENV, SCORER_URL_ENV,
};
