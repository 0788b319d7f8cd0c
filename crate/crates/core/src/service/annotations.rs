//! Concept annotations over the top-30 tokens of a vector, stored as an
//! append-only JSON-lines log.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tokens shown to an annotator per vector.
pub const TOKENS_PER_VECTOR: usize = 30;
/// Smallest number of tokens a pattern may cover.
pub const MIN_PATTERN_TOKENS: usize = 4;

/// What was annotated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnnotationTarget {
    Value { layer: usize, index: usize },
    /// A vector from the random baseline sample.
    RandomBaseline { sample: usize },
    /// The whole FFN update of one layer on one example.
    FfnUpdate { layer: usize, example: usize },
}

impl fmt::Display for AnnotationTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Value { layer, index } => write!(f, "value:{layer}:{index}"),
            Self::RandomBaseline { sample } => write!(f, "random-baseline:{sample}"),
            Self::FfnUpdate { layer, example } => write!(f, "ffn-update:{layer}:{example}"),
        }
    }
}

impl FromStr for AnnotationTarget {
    type Err = Error;

    /// `value:L:I`, `random-baseline:S` or `ffn-update:L:E`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |p: &str| p.parse::<usize>().map_err(|_| Error::Validation(format!("bad target `{s}`")));
        match parts.as_slice() {
            ["value", l, i] => Ok(Self::Value { layer: num(l)?, index: num(i)? }),
            ["random-baseline", n] => Ok(Self::RandomBaseline { sample: num(n)? }),
            ["ffn-update", l, e] => Ok(Self::FfnUpdate { layer: num(l)?, example: num(e)? }),
            _ => Err(Error::Validation(format!("bad target `{s}`; expected value:L:I, random-baseline:S or ffn-update:L:E"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptClass {
    Semantic,
    Syntactic,
    Names,
}

/// One recognised concept: positions (0-based, within the top 30) of the
/// tokens that share it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pattern {
    pub members: Vec<usize>,
    pub description: String,
    pub class: ConceptClass,
    /// Marks a concept made of stopwords, which coverage can leave out.
    #[serde(default)]
    pub stopword: bool,
}

/// An annotation as submitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationDraft {
    pub target: AnnotationTarget,
    pub patterns: Vec<Pattern>,
    pub annotator: String,
    /// Seconds since the Unix epoch; the server fills it in when absent.
    #[serde(default)]
    pub timestamp: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: u64,
    pub target: AnnotationTarget,
    pub patterns: Vec<Pattern>,
    pub annotator: String,
    pub timestamp: u64,
}

impl AnnotationDraft {
    /// Checks the protocol rules: every pattern names at least four distinct
    /// tokens from the top 30 and carries a description.
    pub fn validate(&self) -> Result<()> {
        if self.annotator.trim().is_empty() {
            return Err(Error::Validation("annotator id is empty".into()));
        }
        for (n, p) in self.patterns.iter().enumerate() {
            let distinct: HashSet<usize> = p.members.iter().copied().collect();
            if distinct.len() != p.members.len() {
                return Err(Error::Validation(format!("pattern {n} lists a token twice")));
            }
            if let Some(&bad) = p.members.iter().find(|&&m| m >= TOKENS_PER_VECTOR) {
                return Err(Error::Validation(format!(
                    "pattern {n} refers to position {bad}; only the top {TOKENS_PER_VECTOR} tokens are annotated"
                )));
            }
            if p.members.len() < MIN_PATTERN_TOKENS {
                return Err(Error::Validation(format!(
                    "pattern {n} covers {} tokens; the annotation protocol requires a pattern to occur in at least {MIN_PATTERN_TOKENS} of the top {TOKENS_PER_VECTOR} tokens",
                    p.members.len()
                )));
            }
            if p.description.trim().is_empty() {
                return Err(Error::Validation(format!("pattern {n} has no description")));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Entry {
    Add { record: AnnotationRecord },
    Tombstone { id: u64, timestamp: u64 },
}

#[derive(Default)]
struct State {
    records: Vec<AnnotationRecord>,
    tombstoned: HashSet<u64>,
    next_id: u64,
    /// Bytes of the log already applied.
    applied: u64,
}

impl State {
    fn apply(&mut self, entry: Entry) {
        match entry {
            Entry::Add { record } => {
                self.next_id = self.next_id.max(record.id + 1);
                self.records.push(record);
            }
            Entry::Tombstone { id, .. } => {
                self.tombstoned.insert(id);
            }
        }
    }

    /// Applies log lines appended since the last read (by another writer).
    fn catch_up(&mut self, file: &mut File) -> Result<()> {
        use std::io::{Seek, SeekFrom};
        let len = file.metadata()?.len();
        if len == self.applied {
            return Ok(());
        }
        file.seek(SeekFrom::Start(self.applied))?;
        let mut reader = BufReader::new(&*file);
        let mut line = String::new();
        loop {
            line.clear();
            let n = reader.read_line(&mut line)?;
            if n == 0 {
                break;
            }
            if !line.ends_with('\n') {
                return Err(Error::Store(format!("log ends in a partial line at byte {}", self.applied)));
            }
            if !line.trim().is_empty() {
                let entry: Entry = serde_json::from_str(&line)
                    .map_err(|e| Error::Store(format!("log line at byte {}: {e}", self.applied)))?;
                self.apply(entry);
            }
            self.applied += n as u64;
        }
        Ok(())
    }
}

/// Append-only store. Writers are serialised in-process by a mutex and
/// across processes by an exclusive lock on the log file.
pub struct AnnotationStore {
    path: PathBuf,
    state: Mutex<State>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl AnnotationStore {
    /// Opens (creating if needed) the log at `path` and replays it.
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut file = OpenOptions::new().create(true).append(true).read(true).open(path)?;
        let mut state = State { next_id: 1, ..State::default() };
        file.lock_shared()?;
        let replay = state.catch_up(&mut file);
        file.unlock()?;
        replay?;
        Ok(Self { path: path.to_path_buf(), state: Mutex::new(state) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn append(&self, make: impl FnOnce(&State) -> Result<Entry>) -> Result<Entry> {
        let mut state = self.state.lock().expect("annotation store poisoned");
        let mut file = OpenOptions::new().append(true).read(true).open(&self.path)?;
        file.lock()?;
        let result = (|| {
            state.catch_up(&mut file)?;
            let entry = make(&state)?;
            let mut line = serde_json::to_vec(&entry)?;
            line.push(b'\n');
            file.write_all(&line)?;
            file.sync_data()?;
            // replaying our own line keeps `applied` in step with the file
            state.catch_up(&mut file)?;
            Ok(entry)
        })();
        file.unlock()?;
        result
    }

    /// Validates and stores `draft` under the next id.
    pub fn record(&self, draft: AnnotationDraft) -> Result<AnnotationRecord> {
        draft.validate()?;
        let entry = self.append(|state| {
            Ok(Entry::Add {
                record: AnnotationRecord {
                    id: state.next_id,
                    target: draft.target,
                    patterns: draft.patterns,
                    annotator: draft.annotator,
                    timestamp: draft.timestamp.unwrap_or_else(now),
                },
            })
        })?;
        match entry {
            Entry::Add { record } => Ok(record),
            Entry::Tombstone { .. } => unreachable!("append returns the entry it was given"),
        }
    }

    /// Hides record `id` from listings; the original line stays in the log.
    pub fn tombstone(&self, id: u64) -> Result<()> {
        self.append(|state| {
            if state.tombstoned.contains(&id) || !state.records.iter().any(|r| r.id == id) {
                return Err(Error::UnknownKey(format!("no live annotation with id {id}")));
            }
            Ok(Entry::Tombstone { id, timestamp: now() })
        })?;
        Ok(())
    }

    /// Live records, optionally for one target, in id order.
    pub fn list(&self, target: Option<AnnotationTarget>) -> Result<Vec<AnnotationRecord>> {
        let mut state = self.state.lock().expect("annotation store poisoned");
        let mut file = File::open(&self.path)?;
        file.lock_shared()?;
        let caught = state.catch_up(&mut file);
        file.unlock()?;
        caught?;
        Ok(state
            .records
            .iter()
            .filter(|r| !state.tombstoned.contains(&r.id) && target.is_none_or(|t| r.target == t))
            .cloned()
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub vectors: usize,
    /// Share of the `30 × vectors` shown tokens that belong to any concept.
    pub coverage: f64,
    pub mean_concepts_per_vector: f64,
    /// Share of shown tokens covered by concepts of each class.
    pub per_class: BTreeMap<ConceptClass, f64>,
    pub exclude_stopwords: bool,
}

/// Token-level concept coverage. Each record counts as one annotated vector.
pub fn coverage_report(records: &[AnnotationRecord], exclude_stopwords: bool) -> Result<CoverageReport> {
    if records.is_empty() {
        return Err(Error::Empty("no annotations to report on".into()));
    }
    let mut covered = 0usize;
    let mut concepts = 0usize;
    let mut per_class: BTreeMap<ConceptClass, usize> =
        [ConceptClass::Semantic, ConceptClass::Syntactic, ConceptClass::Names].into_iter().map(|c| (c, 0)).collect();
    for r in records {
        let kept: Vec<&Pattern> = r.patterns.iter().filter(|p| !(exclude_stopwords && p.stopword)).collect();
        concepts += kept.len();
        let all: HashSet<usize> = kept.iter().flat_map(|p| p.members.iter().copied()).collect();
        covered += all.len();
        for (class, n) in per_class.iter_mut() {
            let of_class: HashSet<usize> =
                kept.iter().filter(|p| p.class == *class).flat_map(|p| p.members.iter().copied()).collect();
            *n += of_class.len();
        }
    }
    let shown = (TOKENS_PER_VECTOR * records.len()) as f64;
    Ok(CoverageReport {
        vectors: records.len(),
        coverage: covered as f64 / shown,
        mean_concepts_per_vector: concepts as f64 / records.len() as f64,
        per_class: per_class.into_iter().map(|(c, n)| (c, n as f64 / shown)).collect(),
        exclude_stopwords,
    })
}
