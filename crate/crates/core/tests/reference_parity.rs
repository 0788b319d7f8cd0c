use std::path::{Path, PathBuf};

use ffn_lens::assets::load_weights;
use ffn_lens::math::max_abs_diff;
use ffn_lens::model::{generate, Decoding, ForwardOptions, KvCache, Model};
use serde::Deserialize;

#[derive(Deserialize)]
struct Goldens {
    cases: Vec<Case>,
}

#[derive(Deserialize)]
struct Case {
    ids: Vec<u32>,
    logits: Vec<Vec<f32>>,
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn check_dir(name: &str, tol: f32) {
    let dir = fixture(name);
    let model = Model::new(load_weights(&dir).unwrap());
    let goldens: Goldens = serde_json::from_str(&std::fs::read_to_string(dir.join("goldens.json")).unwrap()).unwrap();
    for case in &goldens.cases {
        let out = model.forward(&case.ids, &ForwardOptions::default()).unwrap();
        for (i, want) in case.logits.iter().enumerate() {
            let diff = max_abs_diff(out.logits.row(i), want);
            assert!(diff < tol, "{name}: len {} pos {i} diff {diff}", case.ids.len());
        }
    }
}

#[test]
fn matches_transformers_f32() {
    check_dir("hf_tiny", 1e-4);
}

#[test]
fn matches_transformers_f16_checkpoint() {
    // goldens come from the f16 weights evaluated in f32
    check_dir("hf_tiny_f16", 1e-3);
}

#[test]
fn incremental_forward_matches_full_pass() {
    let model = Model::new(load_weights(&fixture("hf_tiny")).unwrap());
    let ids: Vec<u32> = (0..20).map(|i| (i * 7 % 64) as u32).collect();
    let full = model.forward(&ids, &ForwardOptions::default()).unwrap();
    let mut cache = KvCache::new(model.config().num_layers);
    let head = model.forward_incremental(&mut cache, &ids[..12], &ForwardOptions::default()).unwrap();
    for i in 0..12 {
        assert_eq!(head.logits.row(i), full.logits.row(i));
    }
    for (i, &id) in ids.iter().enumerate().skip(12) {
        let step = model.forward_incremental(&mut cache, &[id], &ForwardOptions::default()).unwrap();
        assert!(max_abs_diff(step.logits.row(0), full.logits.row(i)) < 1e-5);
    }
}

#[test]
fn greedy_generation_follows_full_pass_argmax() {
    let model = Model::new(load_weights(&fixture("hf_tiny")).unwrap());
    let prompt = [3u32, 9, 27];
    let gen = generate(&model, &prompt, 10, Decoding::Greedy, &ForwardOptions::default()).unwrap();
    let mut seq = prompt.to_vec();
    for &tok in &gen {
        let out = model.forward(&seq, &ForwardOptions::default()).unwrap();
        assert_eq!(tok as usize, ffn_lens::math::argmax(out.logits.row(seq.len() - 1)));
        seq.push(tok);
    }
}
