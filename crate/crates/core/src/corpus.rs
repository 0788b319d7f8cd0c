//! Sentence corpora: one pre-segmented sentence per line.

use std::path::Path;

use crate::assets::Tokenizer;
use crate::error::{Error, Result};
use crate::model::{CoefficientStorage, ForwardOptions, Model, ResidualTrace, TracePositions};

const BUNDLED: &str = include_str!("../assets/corpus/sentences.txt");

pub fn parse_corpus(text: &str) -> Vec<String> {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect()
}

pub fn load_corpus(path: &Path) -> Result<Vec<String>> {
    if !path.exists() {
        return Err(Error::AssetMissing(path.to_path_buf()));
    }
    Ok(parse_corpus(&std::fs::read_to_string(path)?))
}

/// Two hundred plain English sentences.
pub fn bundled_corpus() -> Vec<String> {
    parse_corpus(BUNDLED)
}

/// Traces each sentence at its last position with full coefficients.
/// Sentences are cut to the context window; empty encodings are skipped.
pub fn trace_corpus(model: &Model, tokenizer: &Tokenizer, sentences: &[String]) -> Result<Vec<ResidualTrace>> {
    let ids: Vec<Vec<u32>> = sentences.iter().map(|s| tokenizer.encode(s)).collect();
    trace_sequences(model, &ids)
}

pub fn trace_sequences(model: &Model, sequences: &[Vec<u32>]) -> Result<Vec<ResidualTrace>> {
    let opts = ForwardOptions {
        trace_enabled: true,
        coefficient_storage: CoefficientStorage::Full,
        trace_positions: TracePositions::Last,
        ..ForwardOptions::default()
    };
    let max = model.config().max_positions;
    let mut out = Vec::with_capacity(sequences.len());
    for seq in sequences.iter().filter(|s| !s.is_empty()) {
        let seq = &seq[..seq.len().min(max)];
        out.push(model.forward(seq, &opts)?.trace.expect("tracing enabled"));
    }
    Ok(out)
}
