//! HTTP JSON API over one loaded model: projections, token search, traces,
//! steering previews, annotations, clusters and corpus events.

pub mod annotations;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, PathRejection, QueryRejection};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use crate::analysis::{analysis_position, detect_elimination, detect_saturation, read_points, EliminationEvent, EventOptions, SaturationEvent};
use crate::assets::{describe, Tokenizer};
use crate::cluster::ClusterModel;
use crate::corpus::trace_corpus;
use crate::error::Error;
use crate::lens::{project_vector, ProjectionIndex, SearchHit, DEFAULT_TOP_K};
use crate::math;
use crate::model::{generate_with, trace_records, Decoding, ExportOptions, ForwardOptions, LogitProcessor, Model, TraceRecord};
use crate::steering::{SteeringConfig, SteeringPick};

pub use annotations::{
    coverage_report, AnnotationDraft, AnnotationRecord, AnnotationStore, AnnotationTarget, ConceptClass, CoverageReport,
    Pattern,
};

/// Size of the startup projection index.
pub const INDEX_K: usize = 50;
/// Longest steering preview.
pub const MAX_PREVIEW_STEPS: usize = 64;
/// Tokens shown per step in a steering preview.
const PREVIEW_TOP: usize = 5;

#[derive(Debug, Clone)]
pub struct ServiceOptions {
    /// Concurrent generation requests.
    pub workers: usize,
    pub max_preview_steps: usize,
    pub index_k: usize,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        Self { workers: 2, max_preview_steps: MAX_PREVIEW_STEPS, index_k: INDEX_K }
    }
}

/// Saturation and elimination events of one corpus, computed at startup.
#[derive(Debug, Clone, Serialize)]
pub struct CorpusEvents {
    pub corpus_id: String,
    pub sentences: usize,
    /// Token position analysed in each sentence.
    pub position: &'static str,
    pub saturation: Vec<SaturationEvent>,
    pub elimination: Vec<EliminationEvent>,
}

/// Everything the handlers read. Immutable after construction, apart from
/// the annotation store, which serialises its own writes.
pub struct AppState {
    pub model: Model,
    pub tokenizer: Tokenizer,
    pub index: ProjectionIndex,
    pub store: AnnotationStore,
    pub clusters: Option<ClusterModel>,
    pub corpora: BTreeMap<String, CorpusEvents>,
    pub options: ServiceOptions,
    workers: Semaphore,
}

impl AppState {
    pub fn new(model: Model, tokenizer: Tokenizer, store: AnnotationStore, options: ServiceOptions) -> Self {
        log::info!("building top-{} projection index", options.index_k);
        let index = ProjectionIndex::build(&model, options.index_k);
        Self {
            model,
            tokenizer,
            index,
            store,
            clusters: None,
            corpora: BTreeMap::new(),
            workers: Semaphore::new(options.workers.max(1)),
            options,
        }
    }

    pub fn with_clusters(mut self, clusters: ClusterModel) -> Self {
        self.clusters = Some(clusters);
        self
    }

    /// Traces `sentences` and stores their events under `id`.
    pub fn add_corpus(&mut self, id: &str, sentences: &[String]) -> crate::Result<()> {
        let traces = trace_corpus(&self.model, &self.tokenizer, sentences)?;
        let opts = EventOptions::default();
        let (mut saturation, mut elimination) = (Vec::new(), Vec::new());
        for (ex, trace) in traces.iter().enumerate() {
            let points = read_points(&self.model, trace, analysis_position(trace)?, opts.norm)?;
            saturation.extend(detect_saturation(ex, &points, opts.stay_top));
            elimination.extend(detect_elimination(ex, &points));
        }
        let events = CorpusEvents { corpus_id: id.to_string(), sentences: traces.len(), position: "last", saturation, elimination };
        self.corpora.insert(id.to_string(), events);
        Ok(())
    }
}

/// A JSON error body: `{"error": {"code": ..., "message": ...}}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, code) = match &e {
            Error::Validation(_) | Error::SequenceTooLong { .. } | Error::Empty(_) | Error::Decode { .. } => {
                (StatusCode::UNPROCESSABLE_ENTITY, "invalid")
            }
            Error::Index(_) | Error::UnknownKey(_) => (StatusCode::NOT_FOUND, "not_found"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::new(e.status(), "bad_body", e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl From<PathRejection> for ApiError {
    fn from(e: PathRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": { "code": self.code, "message": self.message } }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;
type Shared = State<Arc<AppState>>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/config", get(config))
        .route("/values/{layer}/{index}/projection", get(projection))
        .route("/search", post(search))
        .route("/trace", post(trace))
        .route("/steer/preview", post(steer_preview))
        .route("/annotations", post(create_annotation).get(list_annotations))
        .route("/annotations/{id}", delete(delete_annotation))
        .route("/reports/coverage", get(coverage))
        .route("/clusters/{id}", get(cluster))
        .route("/events", get(events))
        .with_state(state)
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

async fn health(State(s): Shared) -> Json<Value> {
    Json(json!({ "status": "ok", "model": describe(s.model.weights()) }))
}

async fn config(State(s): Shared) -> Json<Value> {
    Json(json!({
        "model": s.model.config(),
        "index_k": s.index.k,
        "max_preview_steps": s.options.max_preview_steps,
        "workers": s.options.workers,
        "clusters": s.clusters.as_ref().map(|c| c.num_clusters()),
        "corpora": s.corpora.keys().collect::<Vec<_>>(),
    }))
}

#[derive(Serialize)]
struct TokenScore {
    id: u32,
    text: String,
    score: f32,
}

fn token_text(tok: &Tokenizer, id: u32) -> String {
    tok.token_bytes(id).map(|b| String::from_utf8_lossy(b).into_owned()).unwrap_or_default()
}

#[derive(Deserialize)]
struct ProjectionQuery {
    k: Option<usize>,
    #[serde(default)]
    ln: bool,
}

#[derive(Serialize)]
struct ProjectionResponse {
    layer: usize,
    index: usize,
    ln: bool,
    tokens: Vec<TokenScore>,
}

async fn projection(
    State(s): Shared,
    path: std::result::Result<UrlPath<(usize, usize)>, PathRejection>,
    query: std::result::Result<Query<ProjectionQuery>, QueryRejection>,
) -> ApiResult<ProjectionResponse> {
    let UrlPath((layer, index)) = path?;
    let Query(q) = query?;
    let cfg = s.model.config();
    if layer >= cfg.num_layers {
        return Err(ApiError::not_found(format!("layer {layer} outside 0..{}", cfg.num_layers)));
    }
    if index >= cfg.ffn_dim {
        return Err(ApiError::not_found(format!("value index {index} outside 0..{}", cfg.ffn_dim)));
    }
    let v = s.model.weights().value_vector(layer, index)?;
    let ranking = project_vector(&s.model, v, q.ln)?;
    let tokens = ranking
        .top(q.k.unwrap_or(DEFAULT_TOP_K))
        .iter()
        .map(|&id| TokenScore { id, text: token_text(&s.tokenizer, id), score: ranking.scores[id as usize] })
        .collect();
    Ok(Json(ProjectionResponse { layer, index, ln: q.ln, tokens }))
}

#[derive(Deserialize)]
struct SearchRequest {
    token: String,
    k: Option<usize>,
}

#[derive(Serialize)]
struct SearchResult {
    layer: usize,
    index: usize,
    rank: usize,
    token_id: u32,
}

#[derive(Serialize)]
struct SearchResponse {
    token: String,
    k: usize,
    /// Vocabulary entries searched: the query as given and with a leading space.
    token_ids: Vec<u32>,
    results: Vec<SearchResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<String>,
}

async fn search(State(s): Shared, body: std::result::Result<Json<SearchRequest>, JsonRejection>) -> ApiResult<SearchResponse> {
    let Json(req) = body?;
    let k = req.k.unwrap_or(DEFAULT_TOP_K);
    if k == 0 || k > s.index.k {
        return Err(ApiError::bad_request(format!("k must be in 1..={}", s.index.k)));
    }
    let mut token_ids = Vec::new();
    for form in [req.token.clone(), format!(" {}", req.token)] {
        if let Some(id) = s.tokenizer.token_id(form.as_bytes()) {
            if !token_ids.contains(&id) {
                token_ids.push(id);
            }
        }
    }
    let mut results: Vec<SearchResult> = token_ids
        .iter()
        .flat_map(|&id| {
            s.index.search(id, k).into_iter().map(move |SearchHit { layer, index, rank }| SearchResult { layer, index, rank, token_id: id })
        })
        .collect();
    results.sort_by_key(|r| (r.rank, r.layer, r.index, r.token_id));
    let note = token_ids.is_empty().then(|| format!("`{}` is not a vocabulary entry", req.token));
    Ok(Json(SearchResponse { token: req.token, k, token_ids, results, note }))
}

#[derive(Deserialize)]
struct TraceRequest {
    text: String,
    top_k: Option<usize>,
}

#[derive(Serialize)]
struct TraceResponse {
    token_ids: Vec<u32>,
    tokens: Vec<String>,
    records: Vec<TraceRecord>,
}

async fn trace(State(s): Shared, body: std::result::Result<Json<TraceRequest>, JsonRejection>) -> ApiResult<TraceResponse> {
    let Json(req) = body?;
    let ids = s.tokenizer.encode(&req.text);
    if ids.is_empty() {
        return Err(ApiError::from(Error::Empty("text encodes to no tokens".into())));
    }
    let _permit = s.workers.acquire().await.expect("semaphore is never closed");
    let state = s.clone();
    let top_k = req.top_k.unwrap_or(10);
    let response = tokio::task::spawn_blocking(move || -> crate::Result<TraceResponse> {
        let out = state.model.forward(&ids, &ForwardOptions::traced())?;
        let trace = out.trace.expect("tracing enabled");
        let records = trace_records(&state.model, &trace, 0, ExportOptions { top_k, ..Default::default() });
        let tokens = ids.iter().map(|&id| token_text(&state.tokenizer, id)).collect();
        Ok(TraceResponse { token_ids: ids, tokens, records })
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(Json(response))
}

#[derive(Deserialize)]
struct PreviewRequest {
    prompt: String,
    steps: usize,
    #[serde(default)]
    interventions: Vec<SteeringPick>,
    #[serde(default)]
    additive: bool,
    #[serde(default)]
    decoding: Option<Decoding>,
}

#[derive(Serialize)]
struct Continuation {
    ids: Vec<u32>,
    text: String,
    /// Top candidates (id and probability) before each emitted token.
    top_per_step: Vec<Vec<(u32, f32)>>,
}

#[derive(Serialize)]
struct PreviewResponse {
    prompt_ids: Vec<u32>,
    steps: usize,
    baseline: Continuation,
    steered: Continuation,
}

struct TopProbe(Vec<Vec<(u32, f32)>>);

impl LogitProcessor for TopProbe {
    fn process(&mut self, _: &[u32], logits: &mut [f32]) {
        let p = math::softmax(logits);
        self.0.push(math::top_k_indices(&p, PREVIEW_TOP).into_iter().map(|i| (i as u32, p[i])).collect());
    }
}

fn continuation(state: &AppState, prompt: &[u32], steps: usize, decoding: Decoding, opts: &ForwardOptions) -> crate::Result<Continuation> {
    let mut probe = TopProbe(Vec::with_capacity(steps));
    let ids = generate_with(&state.model, prompt, steps, decoding, opts, &mut probe)?;
    let text = state.tokenizer.decode(&ids)?;
    Ok(Continuation { ids, text, top_per_step: probe.0 })
}

async fn steer_preview(State(s): Shared, body: std::result::Result<Json<PreviewRequest>, JsonRejection>) -> ApiResult<PreviewResponse> {
    let Json(req) = body?;
    if req.steps == 0 || req.steps > s.options.max_preview_steps {
        return Err(ApiError::bad_request(format!("steps must be in 1..={}", s.options.max_preview_steps)));
    }
    let config = SteeringConfig { interventions: req.interventions, additive: req.additive, ..SteeringConfig::empty() };
    // an intervention outside the model is a bad request body, not a missing resource
    config.validate(s.model.config()).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid", e.to_string()))?;
    let prompt_ids = s.tokenizer.encode(&req.prompt);
    let decoding = req.decoding.unwrap_or(Decoding::Greedy);
    let steps = req.steps;
    let _permit = s.workers.acquire().await.expect("semaphore is never closed");
    let state = s.clone();
    let response = tokio::task::spawn_blocking(move || -> crate::Result<PreviewResponse> {
        let baseline = continuation(&state, &prompt_ids, steps, decoding, &ForwardOptions::default())?;
        let opts = ForwardOptions::default().with_interventions(config.to_interventions());
        let steered = continuation(&state, &prompt_ids, steps, decoding, &opts)?;
        Ok(PreviewResponse { prompt_ids, steps, baseline, steered })
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(Json(response))
}

fn check_target(s: &AppState, target: &AnnotationTarget) -> std::result::Result<(), ApiError> {
    let cfg = s.model.config();
    let ok = match *target {
        AnnotationTarget::Value { layer, index } => layer < cfg.num_layers && index < cfg.ffn_dim,
        AnnotationTarget::FfnUpdate { layer, .. } => layer < cfg.num_layers,
        AnnotationTarget::RandomBaseline { .. } => true,
    };
    if ok {
        Ok(())
    } else {
        Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid", format!("target {target} is outside the model")))
    }
}

async fn create_annotation(
    State(s): Shared,
    body: std::result::Result<Json<AnnotationDraft>, JsonRejection>,
) -> std::result::Result<(StatusCode, Json<AnnotationRecord>), ApiError> {
    let Json(draft) = body?;
    check_target(&s, &draft.target)?;
    let state = s.clone();
    let record = tokio::task::spawn_blocking(move || state.store.record(draft))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok((StatusCode::CREATED, Json(record)))
}

#[derive(Deserialize)]
struct ListQuery {
    target: Option<String>,
}

async fn list_annotations(
    State(s): Shared,
    query: std::result::Result<Query<ListQuery>, QueryRejection>,
) -> ApiResult<Vec<AnnotationRecord>> {
    let Query(q) = query?;
    let target = q.target.as_deref().map(str::parse::<AnnotationTarget>).transpose().map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(Json(s.store.list(target)?))
}

async fn delete_annotation(
    State(s): Shared,
    path: std::result::Result<UrlPath<u64>, PathRejection>,
) -> std::result::Result<StatusCode, ApiError> {
    let UrlPath(id) = path?;
    let state = s.clone();
    tokio::task::spawn_blocking(move || state.store.tombstone(id))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Deserialize)]
struct CoverageQuery {
    #[serde(default)]
    exclude_stopwords: bool,
}

async fn coverage(State(s): Shared, query: std::result::Result<Query<CoverageQuery>, QueryRejection>) -> ApiResult<CoverageReport> {
    let Query(q) = query?;
    let records = s.store.list(None)?;
    Ok(Json(coverage_report(&records, q.exclude_stopwords)?))
}

#[derive(Serialize)]
struct ClusterResponse {
    id: u32,
    size: usize,
    zero_vectors: bool,
    members: Vec<(u32, u32)>,
    /// Top tokens of the cluster's mean direction.
    centroid_tokens: Vec<TokenScore>,
}

async fn cluster(State(s): Shared, path: std::result::Result<UrlPath<u32>, PathRejection>) -> ApiResult<ClusterResponse> {
    let UrlPath(id) = path?;
    let clusters = s.clusters.as_ref().ok_or_else(|| ApiError::not_found("no cluster model loaded"))?;
    let centroid = clusters.centroid(id).ok_or_else(|| ApiError::not_found(format!("cluster {id} outside 0..{}", clusters.num_clusters())))?;
    let zero_vectors = clusters.zero_cluster() == Some(id);
    let centroid_tokens = if zero_vectors {
        Vec::new()
    } else {
        let ranking = project_vector(&s.model, centroid, false)?;
        ranking
            .top(DEFAULT_TOP_K)
            .iter()
            .map(|&t| TokenScore { id: t, text: token_text(&s.tokenizer, t), score: ranking.scores[t as usize] })
            .collect()
    };
    Ok(Json(ClusterResponse {
        id,
        size: clusters.counts()[id as usize],
        zero_vectors,
        members: clusters.members(id),
        centroid_tokens,
    }))
}

#[derive(Deserialize)]
struct EventsQuery {
    corpus_id: Option<String>,
}

async fn events(State(s): Shared, query: std::result::Result<Query<EventsQuery>, QueryRejection>) -> ApiResult<CorpusEvents> {
    let Query(q) = query?;
    let id = q.corpus_id.ok_or_else(|| ApiError::bad_request("corpus_id is required"))?;
    s.corpora.get(&id).cloned().map(Json).ok_or_else(|| ApiError::not_found(format!("no corpus `{id}` was loaded")))
}
