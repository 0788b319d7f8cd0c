use std::collections::{BTreeMap, HashMap};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ATTRIBUTES: [&str; 6] = ["toxicity", "severe_toxicity", "identity_attack", "insult", "profanity", "threat"];

/// Environment variables read by [`HttpScorer::from_env`].
pub const SCORER_URL_ENV: &str = "FFN_LENS_SCORER_URL";
pub const SCORER_KEY_ENV: &str = "FFN_LENS_SCORER_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    Wordlist,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToxicityScore {
    /// Attribute name to a score in `[0, 1]`.
    pub scores: BTreeMap<String, f64>,
    pub source: ScoreSource,
}

impl ToxicityScore {
    pub fn get(&self, attribute: &str) -> f64 {
        self.scores.get(attribute).copied().unwrap_or(0.0)
    }
}

pub trait ToxicityScorer: Send + Sync {
    fn score(&self, text: &str) -> Result<ToxicityScore>;
}

/// Fraction-of-listed-words heuristic. Every listed word counts toward
/// `toxicity`; other attributes count only words tagged with them.
#[derive(Debug, Clone)]
pub struct WordlistScorer {
    terms: HashMap<String, Vec<usize>>,
}

const BUNDLED: &str = include_str!("../../assets/wordlists/toxicity.tsv");

impl WordlistScorer {
    /// Parses `word<TAB>attr,attr` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut terms = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (word, attrs) = line.split_once('\t').unwrap_or((line, ""));
            let mut ids = vec![0];
            for a in attrs.split(',').map(str::trim).filter(|a| !a.is_empty()) {
                let id = ATTRIBUTES
                    .iter()
                    .position(|x| *x == a)
                    .ok_or_else(|| Error::Validation(format!("wordlist line {}: unknown attribute `{a}`", n + 1)))?;
                if !ids.contains(&id) {
                    ids.push(id);
                }
            }
            terms.insert(word.trim().to_lowercase(), ids);
        }
        Ok(Self { terms })
    }

    pub fn bundled() -> Self {
        Self::parse(BUNDLED).expect("bundled wordlist parses")
    }

    pub fn contains(&self, word: &str) -> bool {
        self.terms.contains_key(&word.to_lowercase())
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.terms.keys().map(String::as_str)
    }
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'')
        .map(|w| w.trim_matches('\'').to_lowercase())
        .filter(|w| !w.is_empty())
}

impl ToxicityScorer for WordlistScorer {
    fn score(&self, text: &str) -> Result<ToxicityScore> {
        let mut hits = [0usize; ATTRIBUTES.len()];
        let mut total = 0usize;
        for w in words(text) {
            total += 1;
            if let Some(ids) = self.terms.get(&w) {
                for &i in ids {
                    hits[i] += 1;
                }
            }
        }
        let scores = ATTRIBUTES
            .iter()
            .zip(hits)
            .map(|(a, h)| (a.to_string(), if total == 0 { 0.0 } else { h as f64 / total as f64 }))
            .collect();
        Ok(ToxicityScore { scores, source: ScoreSource::Wordlist })
    }
}

/// Remote scorer: `POST` of the raw text, answered by a JSON object mapping
/// attribute names to scores.
#[derive(Debug, Clone)]
pub struct HttpScorer {
    endpoint: String,
    key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpScorer {
    pub fn new(endpoint: impl Into<String>, key: Option<String>) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        Ok(Self { endpoint: endpoint.into(), key, client })
    }

    /// `None` when no endpoint is configured.
    pub fn from_env() -> Result<Option<Self>> {
        match std::env::var(SCORER_URL_ENV) {
            Ok(url) if !url.is_empty() => Self::new(url, std::env::var(SCORER_KEY_ENV).ok()).map(Some),
            _ => Ok(None),
        }
    }
}

impl ToxicityScorer for HttpScorer {
    fn score(&self, text: &str) -> Result<ToxicityScore> {
        let mut req = self.client.post(&self.endpoint).header("content-type", "text/plain; charset=utf-8").body(text.to_string());
        if let Some(key) = &self.key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Error::Transport(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(Error::Transport(format!("scorer answered {}", resp.status())));
        }
        let scores: BTreeMap<String, f64> = resp.json().map_err(|e| Error::Transport(e.to_string()))?;
        if let Some((k, v)) = scores.iter().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("scorer returned {k} = {v}, outside [0, 1]")));
        }
        Ok(ToxicityScore { scores, source: ScoreSource::External })
    }
}
