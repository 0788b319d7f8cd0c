//! The `ffn-lens` command line. Every subcommand that writes an artifact also
//! writes a [`RunManifest`] beside it.

pub mod manifest;

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::analysis::{
    analysis_position, detect_elimination, detect_saturation, event_score_table, per_layer_top_candidate_scores, read_points,
    EventOptions, StayTopCheck,
};
use crate::assets::{build_tiny_random_model, describe, load_model_dir, write_gpt2_tokenizer, ModelConfig, Tokenizer, WEIGHTS_FILE};
use crate::cluster::{
    all_value_vectors, build_clusters, find_extreme_clusters, gather_value_vectors, ClusterModel, ClusterParams, ExtremeClusterReport,
    Linkage, VectorKey, DEFAULT_COMPLETE_LIMIT,
};
use crate::corpus::{bundled_corpus, load_corpus, trace_corpus};
use crate::error::Error;
use crate::exit::{build_rule, evaluate, evaluate_seeds, exit_example, ExitVariant, RuleFile, DEFAULT_K_DOMINANT};
use crate::lens::{ln_iou_report, project_vector, ReadoutNorm, DEFAULT_TOP_K};
use crate::model::{trace_records, write_sidecar, Decoding, ForwardOptions, Model, TraceRecord};
use crate::service::{self, AnnotationStore, AppState, ServiceOptions};
use crate::steering::{
    bundled_prompts, load_prompts, perplexity, steer_prompts, HttpScorer, SteeringConfig, ToxicityScorer, WordlistScorer,
    DEFAULT_TEXT_POINTER,
};

pub use manifest::{digest_path, manifest_path, sha256_file, FileDigest, RunManifest};

/// Environment variable consulted when `--model` is omitted.
pub const MODEL_ENV: &str = "FFN_LENS_MODEL";

#[derive(Parser)]
#[command(name = "ffn-lens", version, about = "Instrumented GPT-2 inference and FFN value-vector analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Check or create model directories.
    #[command(subcommand)]
    Assets(AssetsCommand),
    /// Run traced forward passes and export one JSON line per (example, position, layer).
    Trace(TraceArgs),
    /// Project one value vector to the vocabulary.
    Project(ProjectArgs),
    /// Top-k overlap between raw and final-LN projections of every value vector.
    LnIou(LnIouArgs),
    /// Saturation and elimination events over a corpus.
    Events(EventsArgs),
    /// Per-layer scores of the top candidate across dominant sub-updates.
    LayerScores(LayerScoresArgs),
    /// Cluster value vectors by cosine distance.
    #[command(subcommand)]
    Cluster(ClusterCommand),
    /// Build and evaluate the early-exit rule.
    #[command(subcommand)]
    Exit(ExitCommand),
    /// Compare baseline and steered generations.
    Steer(SteerArgs),
    /// Corpus perplexity, optionally under steering.
    Perplexity(PerplexityArgs),
    /// Serve the JSON API.
    Serve(ServeArgs),
}

#[derive(Subcommand)]
pub enum AssetsCommand {
    /// Load a model directory and print its dimensions.
    Validate {
        dir: PathBuf,
    },
    /// Write a small random model (with the GPT-2 tokenizer when the vocabulary is full size).
    Tiny(TinyArgs),
}

#[derive(Args)]
pub struct TinyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50257)]
    pub vocab: usize,
    #[arg(long, default_value_t = 3)]
    pub layers: usize,
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
    #[arg(long, default_value_t = 32)]
    pub ffn: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub positions: usize,
}

#[derive(Args, Clone)]
pub struct ModelArg {
    /// Model directory holding model.safetensors and config.json.
    #[arg(long, env = MODEL_ENV)]
    pub model: PathBuf,
}

#[derive(Args, Clone)]
pub struct CorpusArg {
    /// One sentence per line; the bundled sentences when omitted.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Use only the first N sentences.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum NormArg {
    Raw,
    FinalLn,
}

impl From<NormArg> for ReadoutNorm {
    fn from(n: NormArg) -> Self {
        match n {
            NormArg::Raw => ReadoutNorm::Raw,
            NormArg::FinalLn => ReadoutNorm::FinalLn,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum StayTopArg {
    Both,
    PostOnly,
}

#[derive(Args, Clone)]
pub struct EventArgs {
    #[arg(long, value_enum, default_value = "raw")]
    pub norm: NormArg,
    #[arg(long, value_enum, default_value = "both")]
    pub stay_top: StayTopArg,
}

impl EventArgs {
    fn options(&self) -> EventOptions {
        let stay_top = match self.stay_top {
            StayTopArg::Both => StayTopCheck::BothPoints,
            StayTopArg::PostOnly => StayTopCheck::PostOnly,
        };
        EventOptions { norm: self.norm.into(), stay_top }
    }
}

#[derive(Args)]
pub struct TraceArgs {
    #[command(flatten)]
    pub model: ModelArg,
    /// Text to trace; repeat for several examples.
    #[arg(long)]
    pub text: Vec<String>,
    #[command(flatten)]
    pub corpus: CorpusArg,
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
    #[arg(long, default_value_t = 5)]
    pub top_tokens: usize,
    /// Also write full x, o and x̂ rows per example into this directory.
    #[arg(long)]
    pub sidecar_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ProjectArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[arg(long)]
    pub layer: usize,
    #[arg(long)]
    pub index: usize,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    pub top: usize,
    /// Apply the final LayerNorm before projecting.
    #[arg(long)]
    pub ln: bool,
    /// Write here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct LnIouArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    pub k: usize,
    /// Random baseline vectors.
    #[arg(long, default_value_t = 1000)]
    pub random: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EventsArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[command(flatten)]
    pub corpus: CorpusArg,
    #[command(flatten)]
    pub events: EventArgs,
    /// JSON lines, one per event.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write dominant-versus-random score statistics here.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_K_DOMINANT)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct LayerScoresArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[command(flatten)]
    pub corpus: CorpusArg,
    #[arg(long, default_value_t = DEFAULT_K_DOMINANT)]
    pub k: usize,
    #[arg(long, value_enum, default_value = "raw")]
    pub norm: NormArg,
    /// Cluster model used with `--extreme`.
    #[arg(long, requires = "extreme")]
    pub clusters: Option<PathBuf>,
    /// Extreme-cluster report; sub-updates in its flagged clusters are left out.
    #[arg(long, requires = "clusters")]
    pub extreme: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum LinkageArg {
    Average,
    Single,
    Complete,
}

impl From<LinkageArg> for Linkage {
    fn from(l: LinkageArg) -> Self {
        match l {
            LinkageArg::Average => Linkage::Average,
            LinkageArg::Single => Linkage::Single,
            LinkageArg::Complete => Linkage::Complete,
        }
    }
}

#[derive(Subcommand)]
pub enum ClusterCommand {
    Build(ClusterBuildArgs),
    /// Count threshold-passing sub-updates per cluster and flag the most frequent.
    Extreme(ExtremeArgs),
}

#[derive(Args)]
pub struct ClusterBuildArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[arg(long, default_value_t = 10_000)]
    pub k: usize,
    #[arg(long, value_enum, default_value = "average")]
    pub linkage: LinkageArg,
    /// Cluster only the vectors listed among the top coefficients of this trace export.
    #[arg(long)]
    pub from_trace: Option<PathBuf>,
    #[arg(long)]
    pub subsample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Bytes allowed for the complete-linkage distance table.
    #[arg(long, default_value_t = DEFAULT_COMPLETE_LIMIT)]
    pub complete_limit: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ExtremeArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[arg(long)]
    pub clusters: PathBuf,
    #[command(flatten)]
    pub corpus: CorpusArg,
    #[arg(long, default_value_t = 10.0)]
    pub threshold: f32,
    /// Share of clusters flagged, by hit count.
    #[arg(long, default_value_t = 0.01)]
    pub quantile: f64,
    #[arg(long, value_enum, default_value = "raw")]
    pub norm: NormArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand)]
pub enum ExitCommand {
    Build(ExitBuildArgs),
    Eval(ExitEvalArgs),
}

#[derive(Args)]
pub struct ExitBuildArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[command(flatten)]
    pub corpus: CorpusArg,
    #[arg(long)]
    pub clusters: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K_DOMINANT)]
    pub k_dominant: usize,
    /// Seed of the train/held-out split.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub events: EventArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum VariantArg {
    Simple,
    Strict,
}

#[derive(Args)]
pub struct ExitEvalArgs {
    #[arg(long)]
    pub rule: PathBuf,
    /// Number of split seeds (0..N) to rebuild and evaluate the rule with.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, value_enum, default_value = "simple")]
    pub variant: VariantArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct DecodingArgs {
    /// Sample from the top K tokens instead of greedy decoding.
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl DecodingArgs {
    fn decoding(&self) -> Decoding {
        match self.top_k {
            Some(k) => Decoding::TopK { k, seed: self.seed },
            None => Decoding::Greedy,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ScorerArg {
    /// Bundled word list; offline.
    Wordlist,
    /// External endpoint from FFN_LENS_SCORER_URL (and FFN_LENS_SCORER_KEY).
    Http,
}

#[derive(Args)]
pub struct SteerArgs {
    #[command(flatten)]
    pub model: ModelArg,
    /// Steering picks; the bundled safety picks when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// JSON lines; the bundled prompts when omitted.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// JSON pointer to the prompt text in each line.
    #[arg(long, default_value = DEFAULT_TEXT_POINTER)]
    pub pointer: String,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    #[command(flatten)]
    pub decoding: DecodingArgs,
    #[arg(long, value_enum, default_value = "wordlist")]
    pub scorer: ScorerArg,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Args)]
pub struct PerplexityArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[command(flatten)]
    pub corpus: CorpusArg,
    /// Steering picks applied during scoring.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Prepend the end-of-text id so first tokens are scored too.
    #[arg(long)]
    pub bos: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[arg(long, default_value_t = 7860)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    #[arg(long, default_value = "annotations.jsonl")]
    pub annotations: PathBuf,
    #[arg(long)]
    pub clusters: Option<PathBuf>,
    /// `ID=PATH`, or `bundled`; events are computed at startup. Repeatable.
    #[arg(long)]
    pub corpus: Vec<String>,
    #[arg(long, default_value_t = 2)]
    pub workers: usize,
}

/// Parses `args` (including the program name) and runs the command.
/// Usage errors exit with 2; failures print one JSON object to stderr and exit with 1.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code().clamp(0, 255) as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<Error>().map(error_kind).unwrap_or("failure");
            let chain: Vec<String> = e.chain().skip(1).map(|c| c.to_string()).collect();
            let body = json!({ "error": { "kind": kind, "message": e.to_string(), "causes": chain } });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::TensorAbsent(_) | Error::Dimension { .. } | Error::Corrupt(_) | Error::Config(_) | Error::Format(_) => "asset",
        Error::Tokenizer(_) | Error::Decode { .. } => "tokenizer",
        Error::SequenceTooLong { .. } => "sequence_too_long",
        Error::NumericInstability { .. } => "numeric",
        Error::Index(_) => "index",
        Error::MissingTrace(_) | Error::InsufficientData(_) | Error::Empty(_) => "insufficient_data",
        Error::UnknownKey(_) => "unknown_key",
        Error::Validation(_) => "validation",
        Error::Transport(_) => "transport",
        Error::Store(_) => "store",
        Error::AssetMissing(_) => "asset_missing",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Assets(AssetsCommand::Validate { dir }) => assets_validate(&dir),
        Command::Assets(AssetsCommand::Tiny(a)) => assets_tiny(&a),
        Command::Trace(a) => trace(&a),
        Command::Project(a) => project(&a),
        Command::LnIou(a) => ln_iou(&a),
        Command::Events(a) => events(&a),
        Command::LayerScores(a) => layer_scores(&a),
        Command::Cluster(ClusterCommand::Build(a)) => cluster_build(&a),
        Command::Cluster(ClusterCommand::Extreme(a)) => cluster_extreme(&a),
        Command::Exit(ExitCommand::Build(a)) => exit_build(&a),
        Command::Exit(ExitCommand::Eval(a)) => exit_eval(&a),
        Command::Steer(a) => steer(&a),
        Command::Perplexity(a) => perplexity_cmd(&a),
        Command::Serve(a) => serve(a),
    }
}

struct Loaded {
    model: Model,
    tokenizer: Option<Tokenizer>,
    sha256: String,
}

impl Loaded {
    fn tokenizer(&self) -> anyhow::Result<&Tokenizer> {
        self.tokenizer.as_ref().ok_or_else(|| anyhow!("the model directory has no vocab.json/merges.txt and its vocabulary is not GPT-2's"))
    }
}

fn load(arg: &ModelArg) -> anyhow::Result<Loaded> {
    let (weights, tokenizer) = load_model_dir(&arg.model).with_context(|| format!("loading {}", arg.model.display()))?;
    let sha256 = sha256_file(&arg.model.join(WEIGHTS_FILE))?;
    let tokenizer = tokenizer.or_else(|| (weights.config().vocab_size == 50257).then(Tokenizer::gpt2));
    log::info!("loaded {} ({:?})", arg.model.display(), describe(&weights));
    Ok(Loaded { model: Model::new(weights), tokenizer, sha256 })
}

fn sentences(arg: &CorpusArg, manifest: &mut RunManifest) -> anyhow::Result<Vec<String>> {
    let mut out = match &arg.corpus {
        Some(p) => {
            manifest.input(p)?;
            load_corpus(p)?
        }
        None => {
            let s = bundled_corpus();
            manifest.input_bytes("<bundled corpus>", s.join("\n").as_bytes());
            s
        }
    };
    if let Some(n) = arg.limit {
        out.truncate(n);
    }
    if out.is_empty() {
        bail!(Error::Empty("corpus has no sentences".into()));
    }
    Ok(out)
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_lines<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = std::io::BufWriter::new(fs::File::create(path).with_context(|| format!("writing {}", path.display()))?);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn finish(manifest: RunManifest, out: &Path) -> anyhow::Result<()> {
    let path = manifest.finish(out)?;
    log::info!("wrote {} (manifest {})", out.display(), path.display());
    Ok(())
}

fn assets_validate(dir: &Path) -> anyhow::Result<()> {
    let (weights, tokenizer) = load_model_dir(dir)?;
    let report = json!({
        "dir": dir.display().to_string(),
        "model": describe(&weights),
        "weights_sha256": sha256_file(&dir.join(WEIGHTS_FILE))?,
        "tokenizer": tokenizer.map(|t| t.vocab_size()),
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn assets_tiny(a: &TinyArgs) -> anyhow::Result<()> {
    let config = ModelConfig {
        num_layers: a.layers,
        hidden_dim: a.hidden,
        ffn_dim: a.ffn,
        vocab_size: a.vocab,
        num_heads: a.heads,
        max_positions: a.positions,
        ..ModelConfig::tiny()
    };
    let mut manifest = RunManifest::new("assets tiny", serde_json::to_value(&config)?);
    manifest.seeds.push(a.seed);
    let weights = build_tiny_random_model(a.seed, &config)?;
    weights.save(&a.out)?;
    if a.vocab == 50257 {
        write_gpt2_tokenizer(&a.out)?;
    }
    manifest.model_sha256 = Some(sha256_file(&a.out.join(WEIGHTS_FILE))?);
    finish(manifest, &a.out)
}

fn trace(a: &TraceArgs) -> anyhow::Result<()> {
    let m = load(&a.model)?;
    let tok = m.tokenizer()?;
    let params = json!({ "text": a.text, "top_k": a.top_k, "top_tokens": a.top_tokens, "limit": a.corpus.limit });
    let mut manifest = RunManifest::new("trace", params);
    manifest.model_sha256 = Some(m.sha256.clone());
    let texts = if a.text.is_empty() {
        sentences(&a.corpus, &mut manifest)?
    } else {
        manifest.input_bytes("<--text>", a.text.join("\n").as_bytes());
        a.text.clone()
    };
    let opts = crate::model::ExportOptions { top_k: a.top_k, top_tokens: a.top_tokens };
    let mut all: Vec<TraceRecord> = Vec::new();
    if let Some(dir) = &a.sidecar_dir {
        fs::create_dir_all(dir)?;
    }
    for (example, text) in texts.iter().enumerate() {
        let max = m.model.config().max_positions;
        let ids = tok.encode(text);
        let ids = &ids[..ids.len().min(max)];
        if ids.is_empty() {
            continue;
        }
        let trace = m.model.forward(ids, &ForwardOptions::traced())?.trace.expect("tracing enabled");
        let mut records = trace_records(&m.model, &trace, example, opts);
        if let Some(dir) = &a.sidecar_dir {
            let bin = dir.join(format!("example-{example}.f32"));
            let side = write_sidecar(&trace, &mut records, &bin)?;
            write_json(&dir.join(format!("example-{example}.json")), &side)?;
        }
        all.extend(records);
    }
    write_lines(&a.out, &all)?;
    let extra: Vec<&Path> = a.sidecar_dir.iter().map(PathBuf::as_path).collect();
    manifest.finish_all(&a.out, &extra)?;
    Ok(())
}

#[derive(Serialize)]
struct ProjectedToken {
    id: u32,
    token: String,
    score: f32,
}

fn project(a: &ProjectArgs) -> anyhow::Result<()> {
    let m = load(&a.model)?;
    let v = m.model.weights().value_vector(a.layer, a.index)?;
    let ranking = project_vector(&m.model, v, a.ln)?;
    let tokens: Vec<ProjectedToken> = ranking
        .top(a.top)
        .iter()
        .map(|&id| ProjectedToken {
            id,
            token: m.tokenizer.as_ref().and_then(|t| t.display_token(id).ok()).unwrap_or_default(),
            score: ranking.scores[id as usize],
        })
        .collect();
    let body = json!({ "layer": a.layer, "index": a.index, "ln": a.ln, "tokens": tokens });
    match &a.out {
        Some(out) => {
            let mut manifest = RunManifest::new("project", json!({ "layer": a.layer, "index": a.index, "top": a.top, "ln": a.ln }));
            manifest.model_sha256 = Some(m.sha256.clone());
            write_json(out, &body)?;
            finish(manifest, out)
        }
        None => {
            println!("{}", serde_json::to_string_pretty(&body)?);
            Ok(())
        }
    }
}

fn ln_iou(a: &LnIouArgs) -> anyhow::Result<()> {
    let m = load(&a.model)?;
    let mut manifest = RunManifest::new("ln-iou", json!({ "k": a.k, "random": a.random }));
    manifest.model_sha256 = Some(m.sha256.clone());
    manifest.seeds.push(a.seed);
    let report = ln_iou_report(&m.model, a.k, a.random, a.seed)?;
    write_json(&a.out, &report)?;
    finish(manifest, &a.out)
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum EventLine<'a> {
    Saturation(&'a crate::analysis::SaturationEvent),
    Elimination(&'a crate::analysis::EliminationEvent),
}

fn events(a: &EventsArgs) -> anyhow::Result<()> {
    let m = load(&a.model)?;
    let opts = a.events.options();
    let mut manifest = RunManifest::new("events", json!({ "options": opts, "k": a.k, "limit": a.corpus.limit }));
    manifest.model_sha256 = Some(m.sha256.clone());
    let texts = sentences(&a.corpus, &mut manifest)?;
    let traces = trace_corpus(&m.model, m.tokenizer()?, &texts)?;
    let (mut sat, mut elim) = (Vec::new(), Vec::new());
    for (ex, trace) in traces.iter().enumerate() {
        let points = read_points(&m.model, trace, analysis_position(trace)?, opts.norm)?;
        sat.extend(detect_saturation(ex, &points, opts.stay_top));
        elim.extend(detect_elimination(ex, &points));
    }
    let lines = sat.iter().map(EventLine::Saturation).chain(elim.iter().map(EventLine::Elimination));
    write_lines(&a.out, lines)?;
    if let Some(path) = &a.scores {
        manifest.seeds.push(a.seed);
        let table = event_score_table(&m.model, &traces, &sat, &elim, a.k, a.seed)?;
        write_json(path, &table)?;
        let mut side = manifest.clone();
        side.command = "events --scores".into();
        side.finish(path)?;
    }
    finish(manifest, &a.out)
}

fn flagged_keys(clusters: &ClusterModel, report: &ExtremeClusterReport) -> BTreeSet<VectorKey> {
    report.flagged.iter().flat_map(|&c| clusters.members(c)).collect()
}

fn layer_scores(a: &LayerScoresArgs) -> anyhow::Result<()> {
    let m = load(&a.model)?;
    let params = json!({ "k": a.k, "norm": ReadoutNorm::from(a.norm), "limit": a.corpus.limit, "excluding_extreme": a.extreme.is_some() });
    let mut manifest = RunManifest::new("layer-scores", params);
    manifest.model_sha256 = Some(m.sha256.clone());
    let texts = sentences(&a.corpus, &mut manifest)?;
    let excluded = match (&a.clusters, &a.extreme) {
        (Some(c), Some(e)) => {
            manifest.input(c)?;
            manifest.input(e)?;
            let clusters = ClusterModel::load(c)?;
            let report: ExtremeClusterReport = serde_json::from_slice(&fs::read(e)?)?;
            flagged_keys(&clusters, &report)
        }
        _ => BTreeSet::new(),
    };
    let traces = trace_corpus(&m.model, m.tokenizer()?, &texts)?;
    let stats = per_layer_top_candidate_scores(&m.model, &traces, a.k, a.norm.into(), |l, i| excluded.contains(&(l as u32, i as u32)))?;
    write_json(&a.out, &json!({ "k": a.k, "excluded_vectors": excluded.len(), "layers": stats }))?;
    finish(manifest, &a.out)
}

/// Distinct `(layer, index)` pairs among the top coefficients of a trace export.
fn trace_vector_keys(path: &Path) -> anyhow::Result<Vec<VectorKey>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut keys = BTreeSet::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: TraceRecord = serde_json::from_str(line).with_context(|| format!("{} line {}", path.display(), n + 1))?;
        keys.extend(rec.top_coefficients.iter().map(|&(i, _)| (rec.layer as u32, i)));
    }
    Ok(keys.into_iter().collect())
}

fn cluster_build(a: &ClusterBuildArgs) -> anyhow::Result<()> {
    let m = load(&a.model)?;
    let params = ClusterParams {
        k: a.k,
        linkage: a.linkage.into(),
        subsample: a.subsample,
        seed: a.seed,
        complete_limit: a.complete_limit,
    };
    let mut manifest = RunManifest::new("cluster build", json!({ "params": params, "from_trace": a.from_trace.is_some() }));
    manifest.model_sha256 = Some(m.sha256.clone());
    manifest.seeds.push(a.seed);
    let (keys, vectors) = match &a.from_trace {
        Some(path) => {
            manifest.input(path)?;
            let keys = trace_vector_keys(path)?;
            let vectors = gather_value_vectors(&m.model, &keys)?;
            (keys, vectors)
        }
        None => all_value_vectors(&m.model),
    };
    let clusters = build_clusters(&keys, &vectors, m.model.config().hidden_dim, &params)?;
    clusters.save(&a.out)?;
    finish(manifest, &a.out)
}

fn cluster_extreme(a: &ExtremeArgs) -> anyhow::Result<()> {
    let m = load(&a.model)?;
    let params = json!({ "threshold": a.threshold, "quantile": a.quantile, "norm": ReadoutNorm::from(a.norm), "limit": a.corpus.limit });
    let mut manifest = RunManifest::new("cluster extreme", params);
    manifest.model_sha256 = Some(m.sha256.clone());
    manifest.input(&a.clusters)?;
    let clusters = ClusterModel::load(&a.clusters)?;
    let texts = sentences(&a.corpus, &mut manifest)?;
    let traces = trace_corpus(&m.model, m.tokenizer()?, &texts)?;
    let report = find_extreme_clusters(&m.model, &traces, &clusters, a.threshold, a.quantile, a.norm.into())?;
    write_json(&a.out, &report)?;
    finish(manifest, &a.out)
}

fn exit_build(a: &ExitBuildArgs) -> anyhow::Result<()> {
    let m = load(&a.model)?;
    let opts = a.events.options();
    let mut manifest = RunManifest::new("exit build", json!({ "k_dominant": a.k_dominant, "options": opts, "limit": a.corpus.limit }));
    manifest.model_sha256 = Some(m.sha256.clone());
    manifest.seeds.push(a.seed);
    manifest.input(&a.clusters)?;
    let clusters = ClusterModel::load(&a.clusters)?;
    let texts = sentences(&a.corpus, &mut manifest)?;
    let traces = trace_corpus(&m.model, m.tokenizer()?, &texts)?;
    let examples = traces
        .iter()
        .enumerate()
        .map(|(id, t)| exit_example(&m.model, t, &clusters, id, a.k_dominant, opts))
        .collect::<crate::Result<Vec<_>>>()?;
    let (rule, held_out) = build_rule(&examples, m.model.config().num_layers, a.k_dominant, a.seed)?;
    let file = RuleFile { seed: a.seed, rule, held_out: held_out.iter().map(|e| e.id).collect(), examples };
    write_json(&a.out, &file)?;
    finish(manifest, &a.out)
}

fn exit_eval(a: &ExitEvalArgs) -> anyhow::Result<()> {
    let variant = match a.variant {
        VariantArg::Simple => ExitVariant::Simple,
        VariantArg::Strict => ExitVariant::Strict,
    };
    let mut manifest = RunManifest::new("exit eval", json!({ "variant": variant, "seeds": a.seeds }));
    manifest.input(&a.rule)?;
    let file: RuleFile = serde_json::from_slice(&fs::read(&a.rule).with_context(|| format!("reading {}", a.rule.display()))?)?;
    let held_out: Vec<_> = file.examples.iter().filter(|e| file.held_out.contains(&e.id)).cloned().collect();
    let stored = evaluate(&held_out, &file.rule, variant)?;
    let seeds: Vec<u64> = (0..a.seeds).collect();
    manifest.seeds = seeds.clone();
    let multi = if seeds.is_empty() {
        None
    } else {
        Some(evaluate_seeds(&file.examples, file.rule.num_layers, file.rule.k_dominant, &seeds, variant)?)
    };
    write_json(&a.out, &json!({ "rule_seed": file.seed, "held_out": stored, "seeds": multi }))?;
    finish(manifest, &a.out)
}

fn steering_config(path: Option<&Path>, manifest: &mut RunManifest) -> anyhow::Result<SteeringConfig> {
    Ok(match path {
        Some(p) => {
            manifest.input(p)?;
            SteeringConfig::load(p)?
        }
        None => {
            let c = SteeringConfig::safety_picks();
            manifest.input_bytes("<bundled safety picks>", &serde_json::to_vec(&c)?);
            c
        }
    })
}

fn steer(a: &SteerArgs) -> anyhow::Result<()> {
    let m = load(&a.model)?;
    let decoding = a.decoding.decoding();
    let scorer_name = match a.scorer {
        ScorerArg::Wordlist => "wordlist",
        ScorerArg::Http => "http",
    };
    let params = json!({ "steps": a.steps, "decoding": decoding, "pointer": a.pointer, "limit": a.limit, "scorer": scorer_name });
    let mut manifest = RunManifest::new("steer", params);
    manifest.model_sha256 = Some(m.sha256.clone());
    if let Decoding::TopK { seed, .. } = decoding {
        manifest.seeds.push(seed);
    }
    let config = steering_config(a.config.as_deref(), &mut manifest)?;
    let mut prompts = match &a.prompts {
        Some(p) => {
            manifest.input(p)?;
            load_prompts(p, &a.pointer)?
        }
        None => {
            let p = bundled_prompts();
            manifest.input_bytes("<bundled prompts>", p.join("\n").as_bytes());
            p
        }
    };
    if let Some(n) = a.limit {
        prompts.truncate(n);
    }
    let scorer: Box<dyn ToxicityScorer> = match a.scorer {
        ScorerArg::Wordlist => Box::new(WordlistScorer::bundled()),
        ScorerArg::Http => Box::new(
            HttpScorer::from_env()?.ok_or_else(|| anyhow!("--scorer http needs {} to be set", crate::steering::SCORER_URL_ENV))?,
        ),
    };
    let report = steer_prompts(&m.model, m.tokenizer()?, &prompts, &config, a.steps, decoding, scorer.as_ref())?;
    write_json(&a.report, &report)?;
    finish(manifest, &a.report)
}

fn perplexity_cmd(a: &PerplexityArgs) -> anyhow::Result<()> {
    let m = load(&a.model)?;
    let tok = m.tokenizer()?;
    let mut manifest = RunManifest::new("perplexity", json!({ "bos": a.bos, "limit": a.corpus.limit, "steered": a.config.is_some() }));
    manifest.model_sha256 = Some(m.sha256.clone());
    let interventions = match &a.config {
        Some(p) => {
            manifest.input(p)?;
            let c = SteeringConfig::load(p)?;
            c.validate(m.model.config())?;
            c.to_interventions()
        }
        None => Vec::new(),
    };
    let texts = sentences(&a.corpus, &mut manifest)?;
    let bos = if a.bos { Some(tok.end_of_text().ok_or_else(|| anyhow!("tokenizer has no end-of-text token"))?) } else { None };
    let sequences: Vec<Vec<u32>> = texts.iter().map(|t| bos.into_iter().chain(tok.encode(t)).collect()).collect();
    let report = perplexity(&m.model, &sequences, &interventions)?;
    write_json(&a.out, &report)?;
    finish(manifest, &a.out)
}

fn serve(a: ServeArgs) -> anyhow::Result<()> {
    let m = load(&a.model)?;
    let tokenizer = m.tokenizer()?.clone();
    let store = AnnotationStore::open(&a.annotations)?;
    let options = ServiceOptions { workers: a.workers, ..ServiceOptions::default() };
    let mut state = AppState::new(m.model, tokenizer, store, options);
    if let Some(dir) = &a.clusters {
        state = state.with_clusters(ClusterModel::load(dir)?);
    }
    for spec in &a.corpus {
        let (id, texts) = match spec.split_once('=') {
            Some((id, path)) => (id.to_string(), load_corpus(Path::new(path))?),
            None if spec == "bundled" => (spec.clone(), bundled_corpus()),
            None => bail!(Error::Validation(format!("--corpus `{spec}`: expected ID=PATH or `bundled`"))),
        };
        log::info!("computing events for corpus `{id}` ({} sentences)", texts.len());
        state.add_corpus(&id, &texts)?;
    }
    let addr = SocketAddr::new(a.host, a.port);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(service::serve(Arc::new(state), addr))?;
    Ok(())
}
