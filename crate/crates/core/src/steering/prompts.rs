use std::path::Path;

use crate::error::{Error, Result};

/// JSON pointer to the prompt text in RealToxicityPrompts-style records.
pub const DEFAULT_TEXT_POINTER: &str = "/prompt/text";

const BUNDLED: &str = include_str!("../../assets/prompts/neutral.jsonl");

/// Extracts the string at `pointer` from each non-blank JSONL line.
pub fn parse_prompts(text: &str, pointer: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line)?;
        let s = value
            .pointer(pointer)
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Validation(format!("line {}: no string at `{pointer}`", n + 1)))?;
        out.push(s.to_string());
    }
    Ok(out)
}

pub fn load_prompts(path: &Path, pointer: &str) -> Result<Vec<String>> {
    if !path.exists() {
        return Err(Error::AssetMissing(path.to_path_buf()));
    }
    parse_prompts(&std::fs::read_to_string(path)?, pointer)
}

/// Fifty neutral sentence openings in the same record shape.
pub fn bundled_prompts() -> Vec<String> {
    parse_prompts(BUNDLED, DEFAULT_TEXT_POINTER).expect("bundled prompts parse")
}
