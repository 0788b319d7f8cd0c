//! GPT-2 forward pass with residual-stream and FFN-coefficient capture.

mod export;
mod forward;
mod generate;
mod options;
mod trace;

pub use export::{trace_records, write_jsonl, write_sidecar, ExportOptions, SidecarManifest, TraceRecord};
pub use forward::{FfnOutput, ForwardOutput, KvCache, Model};
pub use generate::{generate, generate_with, sample_top_k, Decoding, LogitProcessor};
pub use options::{CoefficientStorage, ForwardOptions, Intervention, InterventionMode, TracePositions};
pub use trace::{Coefficients, LayerRecord, ResidualTrace};
