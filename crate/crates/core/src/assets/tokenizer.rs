//! Byte-level BPE matching the released GPT-2 tokenizer files.
//!
//! `vocab.json` maps printable-remapped token strings to ids and `merges.txt`
//! lists merge rules in priority order (first line after the version header is
//! the highest priority).

use std::collections::HashMap;
use std::path::Path;

use fancy_regex::Regex;

use crate::error::{Error, Result};

pub const VOCAB_FILE: &str = "vocab.json";
pub const MERGES_FILE: &str = "merges.txt";
pub const END_OF_TEXT: &str = "<|endoftext|>";

const PRETOKENIZE: &str = r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

/// GPT-2's reversible byte → printable char table.
pub fn byte_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut assigned = [false; 256];
    for b in (b'!'..=b'~').chain(0xA1..=0xAC).chain(0xAE..=0xFF) {
        table[b as usize] = char::from_u32(b as u32).unwrap();
        assigned[b as usize] = true;
    }
    let mut n = 0;
    for b in 0..256usize {
        if !assigned[b] {
            table[b] = char::from_u32(256 + n).unwrap();
            n += 1;
        }
    }
    table
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    encoder: HashMap<Vec<u8>, u32>,
    decoder: Vec<Vec<u8>>,
    /// (left id, right id) → (priority, merged id)
    merges: HashMap<(u32, u32), (u32, u32)>,
    byte_ids: [u32; 256],
    pattern: Regex,
}

impl Tokenizer {
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let vocab = dir.join(VOCAB_FILE);
        let merges = dir.join(MERGES_FILE);
        for p in [&vocab, &merges] {
            if !p.exists() {
                return Err(Error::AssetMissing(p.clone()));
            }
        }
        Self::from_strings(&std::fs::read_to_string(vocab)?, &std::fs::read_to_string(merges)?)
    }

    /// The GPT-2 tokenizer bundled with this crate.
    pub fn gpt2() -> Self {
        Self::from_strings(
            include_str!("../../assets/gpt2/vocab.json"),
            include_str!("../../assets/gpt2/merges.txt"),
        )
        .expect("bundled GPT-2 tokenizer assets are valid")
    }

    pub fn from_strings(vocab_json: &str, merges_txt: &str) -> Result<Self> {
        let raw: HashMap<String, u32> = serde_json::from_str(vocab_json)?;
        let mut unicode_to_byte = HashMap::new();
        for (b, c) in byte_to_unicode().iter().enumerate() {
            unicode_to_byte.insert(*c, b as u8);
        }
        let to_bytes = |s: &str| -> Vec<u8> {
            if s == END_OF_TEXT {
                return s.as_bytes().to_vec();
            }
            s.chars().map(|c| unicode_to_byte.get(&c).copied().unwrap_or(b'?')).collect()
        };

        let size = raw.len();
        let mut decoder = vec![Vec::new(); size];
        let mut seen = vec![false; size];
        let mut encoder = HashMap::with_capacity(size);
        for (tok, &id) in &raw {
            let idx = id as usize;
            if idx >= size || seen[idx] {
                return Err(Error::Tokenizer(format!("ids are not a bijection onto [0, {size}) (id {id})")));
            }
            seen[idx] = true;
            let bytes = to_bytes(tok);
            decoder[idx] = bytes.clone();
            encoder.insert(bytes, id);
        }

        let mut byte_ids = [0u32; 256];
        for b in 0..=255u8 {
            byte_ids[b as usize] = *encoder
                .get(&vec![b])
                .ok_or_else(|| Error::Tokenizer(format!("vocabulary lacks the single-byte token {b:#04x}")))?;
        }

        let mut merges = HashMap::new();
        let rules = merges_txt.lines().filter(|l| !l.starts_with("#version") && !l.trim().is_empty());
        for (priority, line) in rules.enumerate() {
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| Error::Tokenizer(format!("malformed merge rule `{line}`")))?;
            let (a, b) = (to_bytes(a), to_bytes(b));
            let lookup = |s: &[u8]| encoder.get(s).copied();
            let joined: Vec<u8> = a.iter().chain(&b).copied().collect();
            match (lookup(&a), lookup(&b), lookup(&joined)) {
                (Some(l), Some(r), Some(m)) => {
                    merges.entry((l, r)).or_insert((priority as u32, m));
                }
                _ => return Err(Error::Tokenizer(format!("merge rule `{line}` references unknown symbols"))),
            }
        }

        let pattern = Regex::new(PRETOKENIZE).map_err(|e| Error::Tokenizer(e.to_string()))?;
        Ok(Self { encoder, decoder, merges, byte_ids, pattern })
    }

    pub fn vocab_size(&self) -> usize {
        self.decoder.len()
    }

    pub fn end_of_text(&self) -> Option<u32> {
        self.encoder.get(END_OF_TEXT.as_bytes()).copied()
    }

    pub fn token_id(&self, bytes: &[u8]) -> Option<u32> {
        self.encoder.get(bytes).copied()
    }

    /// Plain text encoding; special tokens are not parsed out of the input.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for piece in self.pattern.find_iter(text) {
            // the pattern cannot fail on valid UTF-8 with bounded backtracking
            let piece = piece.expect("pre-tokenizer regex");
            self.bpe(piece.as_str().as_bytes(), &mut out);
        }
        out
    }

    fn bpe(&self, piece: &[u8], out: &mut Vec<u32>) {
        if let Some(&id) = self.encoder.get(piece) {
            out.push(id);
            return;
        }
        let mut symbols: Vec<u32> = piece.iter().map(|&b| self.byte_ids[b as usize]).collect();
        loop {
            let mut best: Option<(u32, usize, u32)> = None;
            for i in 0..symbols.len().saturating_sub(1) {
                if let Some(&(rank, merged)) = self.merges.get(&(symbols[i], symbols[i + 1])) {
                    if best.is_none_or(|(r, _, _)| rank < r) {
                        best = Some((rank, i, merged));
                    }
                }
            }
            match best {
                Some((_, i, merged)) => {
                    symbols[i] = merged;
                    symbols.remove(i + 1);
                }
                None => break,
            }
        }
        out.extend(symbols);
    }

    pub fn token_bytes(&self, id: u32) -> Result<&[u8]> {
        self.decoder
            .get(id as usize)
            .map(Vec::as_slice)
            .ok_or(Error::Decode { id, vocab_size: self.decoder.len() })
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            out.extend_from_slice(self.token_bytes(id)?);
        }
        Ok(out)
    }

    /// Decodes to text; byte sequences that are not valid UTF-8 are replaced.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    /// Token text with control and non-UTF-8 bytes shown as escapes.
    pub fn display_token(&self, id: u32) -> Result<String> {
        Ok(escape_bytes(self.token_bytes(id)?))
    }
}

pub fn escape_bytes(bytes: &[u8]) -> String {
    let mut out = String::new();
    for chunk in bytes.utf8_chunks() {
        for c in chunk.valid().chars() {
            match c {
                '\n' => out.push_str("\\n"),
                '\t' => out.push_str("\\t"),
                '\r' => out.push_str("\\r"),
                '\\' => out.push_str("\\\\"),
                c if c.is_control() => out.push_str(&format!("\\u{{{:x}}}", c as u32)),
                c => out.push(c),
            }
        }
        for b in chunk.invalid() {
            out.push_str(&format!("\\x{b:02x}"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_table_is_a_bijection() {
        let t = byte_to_unicode();
        let mut chars: Vec<char> = t.to_vec();
        chars.sort_unstable();
        chars.dedup();
        assert_eq!(chars.len(), 256);
        assert_eq!(t[b' ' as usize], 'Ġ');
    }

    #[test]
    fn gpt2_basic_ids() {
        let tok = Tokenizer::gpt2();
        assert_eq!(tok.vocab_size(), 50257);
        assert_eq!(tok.encode("Hello"), vec![15496]);
        assert_eq!(tok.encode(""), Vec::<u32>::new());
        assert_eq!(tok.end_of_text(), Some(50256));
        assert!(matches!(tok.decode(&[50257]), Err(Error::Decode { .. })));
    }

    #[test]
    fn escapes_invalid_utf8() {
        assert_eq!(escape_bytes(b"a\n\xff"), "a\\n\\xff");
        assert_eq!(escape_bytes(" caf\u{e9}".as_bytes()), " caf\u{e9}");
    }

    #[test]
    fn rejects_non_bijective_vocab() {
        let err = Tokenizer::from_strings(r#"{"a":0,"b":0}"#, "").unwrap_err();
        assert!(matches!(err, Error::Tokenizer(_)));
    }
}
