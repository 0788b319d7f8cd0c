use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ffn_lens::cli::{manifest_path, sha256_file, RunManifest};
use serde_json::Value;

fn ffn_lens(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ffn-lens")).args(args).env("RUST_LOG", "off").env_remove("FFN_LENS_MODEL").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = ffn_lens(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn manifest(output: &Path) -> RunManifest {
    serde_json::from_slice(&fs::read(manifest_path(output)).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// trace → cluster build → exit build → exit eval in `dir`; returns the artifacts.
fn pipeline(dir: &Path) -> [PathBuf; 5] {
    let model = dir.join("model");
    let trace = dir.join("trace.jsonl");
    let clusters = dir.join("clusters");
    let rule = dir.join("rule.json");
    let eval = dir.join("eval.json");
    ok(&["assets", "tiny", "--seed", "11", "--out", s(&model)]);
    ok(&["trace", "--model", s(&model), "--limit", "40", "--top-k", "10", "--out", s(&trace)]);
    ok(&["cluster", "build", "--model", s(&model), "--from-trace", s(&trace), "--k", "12", "--out", s(&clusters)]);
    ok(&["exit", "build", "--model", s(&model), "--clusters", s(&clusters), "--limit", "40", "--seed", "2", "--out", s(&rule)]);
    ok(&["exit", "eval", "--rule", s(&rule), "--seeds", "3", "--out", s(&eval)]);
    [model, trace, clusters, rule, eval]
}

#[test]
fn pipeline_manifests_chain_and_reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let [model, trace, clusters, rule, eval] = pipeline(a.path());

    let weights_sha = sha256_file(&model.join("model.safetensors")).unwrap();
    let m_trace = manifest(&trace);
    let m_clusters = manifest(&clusters);
    let m_rule = manifest(&rule);
    let m_eval = manifest(&eval);
    for m in [&m_trace, &m_clusters, &m_rule] {
        assert_eq!(m.model_sha256.as_deref(), Some(weights_sha.as_str()), "{}", m.command);
    }
    assert_eq!(manifest(&model).model_sha256.as_deref(), Some(weights_sha.as_str()));

    // every artifact a step consumed is one the previous step produced
    let produced = |m: &RunManifest| m.outputs.iter().map(|d| (d.path.clone(), d.sha256.clone())).collect::<Vec<_>>();
    let consumed = |m: &RunManifest| m.inputs.iter().map(|d| (d.path.clone(), d.sha256.clone())).collect::<Vec<_>>();
    assert_eq!(produced(&m_trace), vec![(s(&trace).to_string(), sha256_file(&trace).unwrap())]);
    assert!(consumed(&m_clusters).contains(&produced(&m_trace)[0]));
    assert_eq!(produced(&m_clusters).len(), 3);
    for d in produced(&m_clusters) {
        assert!(consumed(&m_rule).contains(&d), "{d:?}");
    }
    assert_eq!(consumed(&m_eval), produced(&m_rule));
    assert_eq!(m_eval.seeds, vec![0, 1, 2]);
    assert_eq!(m_rule.seeds, vec![2]);

    let report: Value = serde_json::from_slice(&fs::read(&eval).unwrap()).unwrap();
    assert_eq!(report["held_out"]["examples"], 4);
    assert_eq!(report["seeds"]["runs"].as_array().unwrap().len(), 3);

    let again = pipeline(b.path());
    for (x, y) in [trace, rule, eval].iter().zip([&again[1], &again[3], &again[4]]) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
    }
    for f in ["clusters.json", "assignments.bin", "centroids.bin"] {
        assert_eq!(fs::read(clusters.join(f)).unwrap(), fs::read(again[2].join(f)).unwrap(), "{f}");
    }
}

#[test]
fn analysis_commands_write_outputs_with_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let model = d.join("model");
    ok(&["assets", "tiny", "--seed", "5", "--out", s(&model)]);
    let m = s(&model);

    let out = ok(&["assets", "validate", m]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["model"]["n_layer"], 3);
    assert_eq!(v["tokenizer"], 50257);

    let out = ok(&["project", "--model", m, "--layer", "2", "--index", "7", "--top", "5"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["tokens"].as_array().unwrap().len(), 5);

    let clusters = d.join("clusters");
    let (scores, extreme) = (d.join("scores.json"), d.join("extreme.json"));
    // (subcommand words, extra flags, output)
    let runs: Vec<(&[&str], Vec<&str>, PathBuf)> = vec![
        (&["ln-iou"], vec!["--random", "50"], d.join("iou.json")),
        (&["events"], vec!["--limit", "30", "--scores", s(&scores)], d.join("events.jsonl")),
        (&["layer-scores"], vec!["--limit", "30"], d.join("fig.json")),
        (&["cluster", "build"], vec!["--k", "8", "--linkage", "complete"], clusters.clone()),
        (
            &["cluster", "extreme"],
            vec!["--clusters", s(&clusters), "--threshold", "0.5", "--quantile", "0.25", "--limit", "30"],
            extreme.clone(),
        ),
        (&["layer-scores"], vec!["--limit", "30", "--clusters", s(&clusters), "--extreme", s(&extreme)], d.join("fig-filtered.json")),
        (&["perplexity"], vec!["--limit", "20", "--bos"], d.join("ppl.json")),
    ];
    for (cmd, flags, out) in &runs {
        let mut args: Vec<&str> = cmd.to_vec();
        args.extend(["--model", m]);
        args.extend(flags.iter().copied());
        args.extend(["--out", s(out)]);
        ok(&args);
        let man = manifest(out);
        assert!(!man.outputs.is_empty(), "{cmd:?}");
        assert!(man.finished >= man.started);
    }
    let events = fs::read_to_string(d.join("events.jsonl")).unwrap();
    for line in events.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(v["kind"] == "saturation" || v["kind"] == "elimination");
    }
    assert!(manifest_path(&scores).exists());
    let filtered: Value = serde_json::from_slice(&fs::read(d.join("fig-filtered.json")).unwrap()).unwrap();
    assert!(filtered["excluded_vectors"].as_u64().unwrap() > 0);

    let picks = d.join("picks.json");
    fs::write(&picks, r#"[{"layer": 2, "index": 3, "coefficient": 10.0}]"#).unwrap();
    let report = d.join("steer.json");
    ok(&["steer", "--model", m, "--config", s(&picks), "--limit", "3", "--steps", "4", "--report", s(&report)]);
    let v: Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(v["prompts"].as_array().unwrap().len(), 3);
    assert_eq!(manifest(&report).inputs[0].sha256, sha256_file(&picks).unwrap());

    let traced = d.join("one.jsonl");
    let side = d.join("side");
    ok(&["trace", "--model", m, "--text", "Hello world", "--sidecar-dir", s(&side), "--out", s(&traced)]);
    assert_eq!(fs::read_to_string(&traced).unwrap().lines().count(), 2 * 3);
    assert_eq!(fs::metadata(side.join("example-0.f32")).unwrap().len(), 6 * 3 * 16 * 4);
    assert_eq!(manifest(&traced).outputs.len(), 3);
}

#[test]
fn usage_and_failure_exit_codes() {
    let help = ffn_lens(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("Usage"));
    assert_eq!(ffn_lens(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(ffn_lens(&["trace", "--bogus"]).status.code(), Some(2));
    assert_eq!(ffn_lens(&["project", "--layer", "0"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let out = ffn_lens(&["project", "--model", s(&missing), "--layer", "0", "--index", "0"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let v: Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(v["error"]["kind"], "asset_missing");

    let model = dir.path().join("model");
    ok(&["assets", "tiny", "--out", s(&model)]);
    let out = ffn_lens(&["project", "--model", s(&model), "--layer", "0", "--index", "99"]);
    assert_eq!(out.status.code(), Some(1));
    let v: Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).lines().last().unwrap()).unwrap();
    assert_eq!(v["error"]["kind"], "index");
    let out = ffn_lens(&["exit", "build", "--model", s(&model), "--clusters", s(&missing), "--out", s(&dir.path().join("r.json"))]);
    assert_eq!(out.status.code(), Some(1));
}
