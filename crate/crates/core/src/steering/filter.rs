use serde::{Deserialize, Serialize};

use crate::assets::Tokenizer;
use crate::error::Result;
use crate::model::LogitProcessor;

/// A token that completes a banned byte string when the text generated so far
/// ends, at a token boundary, with `prefix`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub token: u32,
    pub prefix: Vec<u8>,
}

/// Decoding-time ban list. Each word is banned both bare and with a leading
/// space; a generation never contains a token window that decodes exactly to
/// either form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordFilter {
    pub words: Vec<String>,
    pub skipped: Vec<String>,
    /// Banned byte strings.
    pub targets: Vec<Vec<u8>>,
    /// Per target, every token whose bytes are a suffix of it.
    pub completions: Vec<Vec<Completion>>,
}

impl WordFilter {
    pub fn compile(tokenizer: &Tokenizer, words: &[impl AsRef<str>]) -> Self {
        let mut filter = Self {
            words: Vec::new(),
            skipped: Vec::new(),
            targets: Vec::new(),
            completions: Vec::new(),
        };
        for w in words {
            let w = w.as_ref();
            let bare = w.trim();
            if bare.is_empty() {
                log::warn!("word filter: skipping unrepresentable entry {w:?}");
                filter.skipped.push(w.to_string());
                continue;
            }
            filter.words.push(bare.to_string());
            for target in [bare.as_bytes().to_vec(), format!(" {bare}").into_bytes()] {
                if filter.targets.contains(&target) {
                    continue;
                }
                let mut comps = Vec::new();
                for split in 0..target.len() {
                    if let Some(token) = tokenizer.token_id(&target[split..]) {
                        comps.push(Completion { token, prefix: target[..split].to_vec() });
                    }
                }
                filter.targets.push(target);
                filter.completions.push(comps);
            }
        }
        filter
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Tokens that must not follow `generated`.
    pub fn banned_next(&self, tokenizer: &Tokenizer, generated: &[u32]) -> Result<Vec<u32>> {
        let mut out = Vec::new();
        for comps in &self.completions {
            for c in comps {
                if ends_with_at_boundary(tokenizer, generated, &c.prefix)? {
                    out.push(c.token);
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }

    /// Wraps the filter as a [`LogitProcessor`] for a prompt of `prompt_len`
    /// tokens; only the continuation is inspected.
    pub fn processor<'a>(&'a self, tokenizer: &'a Tokenizer, prompt_len: usize) -> FilterProcessor<'a> {
        FilterProcessor { filter: self, tokenizer, prompt_len }
    }

    /// Token windows of `generated` that decode exactly to a banned form.
    pub fn violations(&self, tokenizer: &Tokenizer, generated: &[u32]) -> Result<Vec<(usize, usize)>> {
        let mut out = Vec::new();
        for i in 0..generated.len() {
            let mut bytes = Vec::new();
            for j in i..generated.len() {
                bytes.extend_from_slice(tokenizer.token_bytes(generated[j])?);
                if self.targets.contains(&bytes) {
                    out.push((i, j + 1));
                }
                if self.targets.iter().all(|t| !t.starts_with(&bytes)) {
                    break;
                }
            }
        }
        Ok(out)
    }
}

/// Whether the bytes of some trailing run of whole tokens equal `prefix`.
fn ends_with_at_boundary(tokenizer: &Tokenizer, generated: &[u32], prefix: &[u8]) -> Result<bool> {
    let mut remaining = prefix;
    for &t in generated.iter().rev() {
        if remaining.is_empty() {
            return Ok(true);
        }
        let b = tokenizer.token_bytes(t)?;
        if !remaining.ends_with(b) {
            return Ok(false);
        }
        remaining = &remaining[..remaining.len() - b.len()];
    }
    Ok(remaining.is_empty())
}

pub struct FilterProcessor<'a> {
    filter: &'a WordFilter,
    tokenizer: &'a Tokenizer,
    prompt_len: usize,
}

impl LogitProcessor for FilterProcessor<'_> {
    fn process(&mut self, context: &[u32], logits: &mut [f32]) {
        let generated = &context[self.prompt_len.min(context.len())..];
        // ids come from the model's own vocabulary, so lookups cannot fail
        if let Ok(banned) = self.filter.banned_next(self.tokenizer, generated) {
            for t in banned {
                if let Some(l) = logits.get_mut(t as usize) {
                    *l = f32::NEG_INFINITY;
                }
            }
        }
    }
}
