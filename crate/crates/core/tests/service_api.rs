mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use ffn_lens::assets::Tokenizer;
use ffn_lens::cluster::{all_value_vectors, build_clusters, ClusterParams, Linkage};
use ffn_lens::corpus::bundled_corpus;
use ffn_lens::lens::project_vector;
use ffn_lens::service::{
    coverage_report, router, AnnotationDraft, AnnotationRecord, AnnotationStore, AnnotationTarget, AppState, ConceptClass,
    Pattern, ServiceOptions,
};

fn state(dir: &std::path::Path) -> Arc<AppState> {
    let model = common::tiny_with(7, |c| c.vocab_size = 50257);
    let (keys, vectors) = all_value_vectors(&model);
    let clusters = build_clusters(&keys, &vectors, model.config().hidden_dim, &ClusterParams::new(4, Linkage::Average)).unwrap();
    let store = AnnotationStore::open(&dir.join("annotations.jsonl")).unwrap();
    let mut state = AppState::new(model, Tokenizer::gpt2(), store, ServiceOptions::default()).with_clusters(clusters);
    let sentences: Vec<String> = bundled_corpus().into_iter().take(6).collect();
    state.add_corpus("bundled", &sentences).unwrap();
    Arc::new(state)
}

async fn call(state: &Arc<AppState>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = router(state.clone()).oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

fn pattern(members: &[usize], class: ConceptClass) -> Pattern {
    Pattern { members: members.to_vec(), description: "shared concept".into(), class, stopword: false }
}

fn draft(target: AnnotationTarget, patterns: Vec<Pattern>) -> AnnotationDraft {
    AnnotationDraft { target, patterns, annotator: "a1".into(), timestamp: Some(1) }
}

#[tokio::test]
async fn health_config_and_projection() {
    let dir = tempfile::tempdir().unwrap();
    let s = state(dir.path());
    let (status, body) = call(&s, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");
    let (_, body) = call(&s, "GET", "/config", None).await;
    assert_eq!(body["model"]["num_layers"], 3);
    assert_eq!(body["corpora"], json!(["bundled"]));

    let (status, body) = call(&s, "GET", "/values/1/5/projection?k=7", None).await;
    assert_eq!(status, StatusCode::OK);
    let expect = project_vector(&s.model, s.model.weights().value_vector(1, 5).unwrap(), false).unwrap();
    let ids: Vec<u32> = body["tokens"].as_array().unwrap().iter().map(|t| t["id"].as_u64().unwrap() as u32).collect();
    assert_eq!(ids, expect.top(7));

    let (status, body) = call(&s, "GET", "/values/1/5/projection?ln=true", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["tokens"].as_array().unwrap().len(), 30);

    for uri in ["/values/3/0/projection", "/values/0/32/projection"] {
        let (status, body) = call(&s, "GET", uri, None).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
        assert_eq!(body["error"]["code"], "not_found");
    }
    let (status, _) = call(&s, "GET", "/values/x/0/projection", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn search_hits_really_contain_the_token() {
    let dir = tempfile::tempdir().unwrap();
    let s = state(dir.path());
    let (_, body) = call(&s, "POST", "/search", Some(json!({"token": "the"}))).await;
    assert_eq!(body["token_ids"], json!([1169, 262]), "bare and space-prefixed forms");

    // query the top token of one value vector so hits are guaranteed
    let top = project_vector(&s.model, s.model.weights().value_vector(2, 9).unwrap(), false).unwrap().top(1)[0];
    let text = String::from_utf8_lossy(s.tokenizer.token_bytes(top).unwrap()).into_owned();
    let (status, body) = call(&s, "POST", "/search", Some(json!({"token": text, "k": 40}))).await;
    assert_eq!(status, StatusCode::OK);
    let ids: Vec<u32> = body["token_ids"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap() as u32).collect();
    assert!(ids.contains(&top));
    let hits = body["results"].as_array().unwrap();
    assert!(!hits.is_empty());
    for h in hits {
        let (layer, index, rank) = (h["layer"].as_u64().unwrap() as usize, h["index"].as_u64().unwrap() as usize, h["rank"].as_u64().unwrap() as usize);
        let token = h["token_id"].as_u64().unwrap() as u32;
        let ranking = project_vector(&s.model, s.model.weights().value_vector(layer, index).unwrap(), false).unwrap();
        assert_eq!(ranking.rank_of(token), Some(rank));
        assert!(rank <= 40);
    }
    // every vector whose top 40 holds the token is reported
    let total: usize = (0..3)
        .flat_map(|l| (0..32).map(move |i| (l, i)))
        .map(|(l, i)| {
            let r = project_vector(&s.model, s.model.weights().value_vector(l, i).unwrap(), false).unwrap();
            ids.iter().filter(|&&t| r.rank_of(t).unwrap() <= 40).count()
        })
        .sum();
    assert_eq!(hits.len(), total);

    let (status, body) = call(&s, "POST", "/search", Some(json!({"token": "qzxqzxqzx"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert!(body["results"].as_array().unwrap().is_empty());
    assert!(body["note"].is_string());
    let (status, _) = call(&s, "POST", "/search", Some(json!({"token": "the", "k": 51}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&s, "POST", "/search", Some(json!({"tok": "the"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn trace_and_steer_preview() {
    let dir = tempfile::tempdir().unwrap();
    let s = state(dir.path());
    let (status, body) = call(&s, "POST", "/trace", Some(json!({"text": "The cat sat", "top_k": 3}))).await;
    assert_eq!(status, StatusCode::OK);
    let n = body["token_ids"].as_array().unwrap().len();
    let records = body["records"].as_array().unwrap();
    assert_eq!(records.len(), n * 3);
    assert!(records.iter().all(|r| r["top_coefficients"].as_array().unwrap().len() == 3));

    let picks = json!([{"layer": 2, "index": 4, "coefficient": 25.0}]);
    let (status, body) = call(&s, "POST", "/steer/preview", Some(json!({"prompt": "Hello", "steps": 6, "interventions": picks}))).await;
    assert_eq!(status, StatusCode::OK);
    for side in ["baseline", "steered"] {
        assert_eq!(body[side]["ids"].as_array().unwrap().len(), 6);
        let steps = body[side]["top_per_step"].as_array().unwrap();
        assert_eq!(steps.len(), 6);
        assert!(steps.iter().all(|t| t.as_array().unwrap().len() == 5));
    }
    let (status, body) = call(&s, "POST", "/steer/preview", Some(json!({"prompt": "Hello", "steps": 6}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["baseline"], body["steered"]);

    let (status, _) = call(&s, "POST", "/steer/preview", Some(json!({"prompt": "Hello", "steps": 65}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let bad = json!([{"layer": 9, "index": 0, "coefficient": 1.0}]);
    let (status, body) = call(&s, "POST", "/steer/preview", Some(json!({"prompt": "Hello", "steps": 2, "interventions": bad}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"]["code"], "invalid");
}

#[tokio::test]
async fn annotation_round_trip_rejection_and_tombstone() {
    let dir = tempfile::tempdir().unwrap();
    let s = state(dir.path());
    let target = AnnotationTarget::Value { layer: 1, index: 3 };
    let d = draft(target, vec![pattern(&[0, 2, 5, 9], ConceptClass::Semantic)]);
    let (status, body) = call(&s, "POST", "/annotations", Some(serde_json::to_value(&d).unwrap())).await;
    assert_eq!(status, StatusCode::CREATED);
    let rec: AnnotationRecord = serde_json::from_value(body).unwrap();
    assert_eq!(rec.id, 1);
    assert_eq!(rec.patterns, d.patterns);

    let other = draft(AnnotationTarget::RandomBaseline { sample: 4 }, vec![]);
    let (status, _) = call(&s, "POST", "/annotations", Some(serde_json::to_value(&other).unwrap())).await;
    assert_eq!(status, StatusCode::CREATED);

    let (_, body) = call(&s, "GET", "/annotations?target=value:1:3", None).await;
    let listed: Vec<AnnotationRecord> = serde_json::from_value(body).unwrap();
    assert_eq!(listed, vec![rec.clone()]);
    let (_, body) = call(&s, "GET", "/annotations", None).await;
    assert_eq!(body.as_array().unwrap().len(), 2);

    let short = draft(target, vec![pattern(&[0, 1, 2], ConceptClass::Names)]);
    let (status, body) = call(&s, "POST", "/annotations", Some(serde_json::to_value(&short).unwrap())).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["error"]["message"].as_str().unwrap().contains("at least 4 of the top 30"));
    let outside = draft(target, vec![pattern(&[0, 1, 2, 30], ConceptClass::Names)]);
    let (status, _) = call(&s, "POST", "/annotations", Some(serde_json::to_value(&outside).unwrap())).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let off_model = draft(AnnotationTarget::Value { layer: 5, index: 0 }, vec![]);
    let (status, _) = call(&s, "POST", "/annotations", Some(serde_json::to_value(&off_model).unwrap())).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = call(&s, "GET", "/annotations?target=value:1", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, _) = call(&s, "DELETE", "/annotations/1", None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let (status, _) = call(&s, "DELETE", "/annotations/1", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (_, body) = call(&s, "GET", "/annotations", None).await;
    assert_eq!(body.as_array().unwrap().len(), 1);

    // the log keeps both records and the tombstone; a reopened store agrees
    let log = std::fs::read_to_string(dir.path().join("annotations.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let reopened = AnnotationStore::open(&dir.path().join("annotations.jsonl")).unwrap();
    assert_eq!(reopened.list(None).unwrap().len(), 1);
    let next = reopened.record(draft(target, vec![])).unwrap();
    assert_eq!(next.id, 3);
}

fn rec(id: u64, patterns: Vec<Pattern>) -> AnnotationRecord {
    AnnotationRecord { id, target: AnnotationTarget::Value { layer: 0, index: id as usize }, patterns, annotator: "a".into(), timestamp: 0 }
}

#[test]
fn coverage_fixtures() {
    let one = coverage_report(&[rec(1, vec![pattern(&[0, 1, 2, 3], ConceptClass::Semantic)])], false).unwrap();
    assert!((one.coverage - 4.0 / 30.0).abs() < 1e-12);
    assert_eq!(one.mean_concepts_per_vector, 1.0);

    let all: Vec<usize> = (0..30).collect();
    let full = coverage_report(&[rec(1, vec![pattern(&all, ConceptClass::Syntactic)])], false).unwrap();
    assert_eq!(full.coverage, 1.0);
    assert_eq!(full.per_class[&ConceptClass::Syntactic], 1.0);
    assert_eq!(full.per_class[&ConceptClass::Names], 0.0);

    // five vectors, covered token counts worked out by hand:
    // 1: {0..3} ∪ {2..7} = 8 tokens, 2 concepts
    // 2: nothing
    // 3: {10..19} = 10 tokens, 1 concept
    // 4: {0..29} = 30 tokens, 1 concept
    // 5: stopword pattern {20..23} = 4 tokens, plus {0,5,10,15} names = 8, 2 concepts
    let mut stop = pattern(&[20, 21, 22, 23], ConceptClass::Syntactic);
    stop.stopword = true;
    let records = vec![
        rec(1, vec![pattern(&[0, 1, 2, 3], ConceptClass::Semantic), pattern(&[2, 3, 4, 5, 6, 7], ConceptClass::Syntactic)]),
        rec(2, vec![]),
        rec(3, vec![pattern(&(10..20).collect::<Vec<_>>(), ConceptClass::Semantic)]),
        rec(4, vec![pattern(&all, ConceptClass::Names)]),
        rec(5, vec![stop, pattern(&[0, 5, 10, 15], ConceptClass::Names)]),
    ];
    let r = coverage_report(&records, false).unwrap();
    assert_eq!(r.vectors, 5);
    assert!((r.coverage - 56.0 / 150.0).abs() < 1e-12);
    assert!((r.mean_concepts_per_vector - 6.0 / 5.0).abs() < 1e-12);
    assert!((r.per_class[&ConceptClass::Semantic] - 14.0 / 150.0).abs() < 1e-12);
    assert!((r.per_class[&ConceptClass::Syntactic] - 10.0 / 150.0).abs() < 1e-12);
    assert!((r.per_class[&ConceptClass::Names] - 34.0 / 150.0).abs() < 1e-12);
    let r = coverage_report(&records, true).unwrap();
    assert!((r.coverage - 52.0 / 150.0).abs() < 1e-12);
    assert!((r.mean_concepts_per_vector - 5.0 / 5.0).abs() < 1e-12);

    assert!(coverage_report(&[], false).is_err());
}

#[tokio::test]
async fn coverage_endpoint_and_clusters_and_events() {
    let dir = tempfile::tempdir().unwrap();
    let s = state(dir.path());
    let (status, body) = call(&s, "GET", "/reports/coverage", None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"]["code"], "invalid");
    s.store.record(draft(AnnotationTarget::Value { layer: 0, index: 0 }, vec![pattern(&[0, 1, 2, 3], ConceptClass::Semantic)])).unwrap();
    let (status, body) = call(&s, "GET", "/reports/coverage?exclude_stopwords=true", None).await;
    assert_eq!(status, StatusCode::OK);
    assert!((body["coverage"].as_f64().unwrap() - 4.0 / 30.0).abs() < 1e-12);

    let clusters = s.clusters.as_ref().unwrap();
    let mut seen = 0;
    for id in 0..clusters.num_clusters() {
        let (status, body) = call(&s, "GET", &format!("/clusters/{id}"), None).await;
        assert_eq!(status, StatusCode::OK);
        let size = body["size"].as_u64().unwrap() as usize;
        assert_eq!(body["members"].as_array().unwrap().len(), size);
        seen += size;
    }
    assert_eq!(seen, 96);
    let (status, _) = call(&s, "GET", &format!("/clusters/{}", clusters.num_clusters()), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, body) = call(&s, "GET", "/events?corpus_id=bundled", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["sentences"], 6);
    let (status, _) = call(&s, "GET", "/events", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&s, "GET", "/events?corpus_id=nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[test]
fn concurrent_writers_get_unique_ids_and_survive_reload() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.jsonl");
    // two handles on the same file stand in for two processes
    let stores = [Arc::new(AnnotationStore::open(&path).unwrap()), Arc::new(AnnotationStore::open(&path).unwrap())];
    let threads: Vec<_> = (0..8)
        .map(|t| {
            let store = stores[t % 2].clone();
            std::thread::spawn(move || {
                (0..25)
                    .map(|i| {
                        let d = draft(AnnotationTarget::FfnUpdate { layer: t, example: i }, vec![pattern(&[0, 1, 2, 3], ConceptClass::Names)]);
                        store.record(d).unwrap().id
                    })
                    .collect::<Vec<u64>>()
            })
        })
        .collect();
    let mut ids: Vec<u64> = threads.into_iter().flat_map(|t| t.join().unwrap()).collect();
    ids.sort_unstable();
    assert_eq!(ids, (1..=200).collect::<Vec<u64>>());

    let reloaded = AnnotationStore::open(&path).unwrap();
    let all = reloaded.list(None).unwrap();
    assert_eq!(all.len(), 200);
    assert_eq!(all.iter().map(|r| r.id).collect::<Vec<_>>(), ids);
    assert_eq!(stores[0].list(None).unwrap(), all);
    assert_eq!(stores[1].list(None).unwrap(), all);
}
