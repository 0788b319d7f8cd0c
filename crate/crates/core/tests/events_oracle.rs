mod common;

use common::oracles::{read_scan, scan_elimination, scan_saturation};
use common::{random_inputs, tiny_model};
use ffn_lens::analysis::{
    analysis_position, contribution_profile, detect_elimination, detect_saturation, dominant_subupdates,
    dominant_subupdates_filtered, event_score_stats, per_layer_top_candidate_scores, read_points, EventRef,
    EventScoreMode, StayTopCheck,
};
use ffn_lens::corpus::trace_sequences;
use ffn_lens::lens::ReadoutNorm;
use ffn_lens::model::{ForwardOptions, Intervention, ResidualTrace};
use ffn_lens::Model;

fn traces(model: &Model, n: usize, seed: u64) -> Vec<ResidualTrace> {
    trace_sequences(model, &random_inputs(n, 50, 12, seed)).unwrap()
}

#[test]
fn detectors_match_a_literal_scan() {
    let (mut sat, mut elim) = (0, 0);
    for seed in 0..4u64 {
        let model = tiny_model(100 + seed);
        let traces = traces(&model, 50, seed);
        for (ex, trace) in traces.iter().enumerate() {
            let pos = analysis_position(trace).unwrap();
            for norm in [ReadoutNorm::Raw, ReadoutNorm::FinalLn] {
                let points = read_points(&model, trace, pos, norm).unwrap();
                let o = read_scan(&model, trace, pos, norm);
                assert_eq!(points.pre_top.iter().map(|&t| t as usize).collect::<Vec<_>>(), o.pre);
                assert_eq!(points.post_top.iter().map(|&t| t as usize).collect::<Vec<_>>(), o.post);
                assert_eq!(points.pre_top_rank_after, o.rank_after);
                for (check, both) in [(StayTopCheck::BothPoints, true), (StayTopCheck::PostOnly, false)] {
                    let got = detect_saturation(ex, &points, check);
                    assert_eq!(got.as_ref().map(|e| e.layer), scan_saturation(&o, both), "example {ex}");
                    if let Some(e) = got {
                        assert_eq!(e.reference_token as usize, o.w);
                        sat += 1;
                    }
                }
                let got = detect_elimination(ex, &points);
                assert_eq!(got.as_ref().map(|e| (e.layer, e.rank_after)), scan_elimination(&o));
                if let Some(e) = got {
                    assert_eq!(e.reference_token as usize, o.pre[e.layer]);
                    elim += 1;
                }
            }
        }
    }
    // the scan must exercise both branches
    assert!(sat > 0 && elim > 0, "saturation {sat}, elimination {elim}");
}

#[test]
fn dominance_matches_a_full_sort() {
    let model = tiny_model(7);
    for trace in traces(&model, 20, 3) {
        let pos = analysis_position(&trace).unwrap();
        for layer in 0..3 {
            let m = trace.record(pos, layer).unwrap().coefficients.full().unwrap().to_vec();
            let w: Vec<f64> = (0..32)
                .map(|i| {
                    let v = model.weights().value_vector(layer, i).unwrap();
                    m[i].abs() as f64 * v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt()
                })
                .collect();
            let mut idx: Vec<usize> = (0..32).collect();
            idx.sort_by(|&a, &b| w[b].partial_cmp(&w[a]).unwrap().then(a.cmp(&b)));
            let dom = dominant_subupdates(&model, &trace, pos, layer, 10).unwrap();
            let got: Vec<usize> = dom.records.iter().map(|r| r.index).collect();
            assert_eq!(got, idx[..10]);
            let total: f64 = w.iter().sum();
            for r in &dom.records {
                assert!((r.contribution - w[r.index] / total).abs() < 1e-5);
            }
            let all = dominant_subupdates(&model, &trace, pos, layer, 32).unwrap();
            let sum: f64 = all.records.iter().map(|r| r.contribution).sum();
            assert!((sum - 1.0).abs() < 1e-9);
            let filtered = dominant_subupdates_filtered(&model, &trace, pos, layer, 5, |_, i| i == idx[0]).unwrap();
            assert_eq!(filtered.records.iter().map(|r| r.index).collect::<Vec<_>>(), idx[1..6]);
        }
    }
    assert!(dominant_subupdates(&model, &traces(&model, 1, 0)[0], 0, 0, 33).is_err());
}

#[test]
fn top_k_beats_random_and_full_set_is_one() {
    let model = tiny_model(8);
    let traces = traces(&model, 30, 5);
    let full = contribution_profile(&model, &traces, 32, 1).unwrap();
    for l in &full.layers {
        assert!((l.top_k - 1.0).abs() < 1e-9 && (l.random_k - 1.0).abs() < 1e-9);
    }
    let p = contribution_profile(&model, &traces, 5, 1).unwrap();
    for l in &p.layers {
        assert!(l.top_k >= l.random_k, "layer {}", l.layer);
        assert!(l.top_k > 0.0 && l.top_k <= 1.0);
    }
    assert_eq!(p, contribution_profile(&model, &traces, 5, 1).unwrap());
    assert!(contribution_profile(&model, &[], 5, 1).is_err());
}

#[test]
fn degenerate_layer_contributes_zero() {
    let model = tiny_model(9);
    let ivs: Vec<_> = (0..32).map(|i| Intervention::zero(0, i)).collect();
    let opts = ForwardOptions::traced().with_interventions(ivs);
    let trace = model.forward(&[1, 2, 3], &opts).unwrap().trace.unwrap();
    let dom = dominant_subupdates(&model, &trace, 2, 0, 4).unwrap();
    assert!(dom.degenerate);
    assert!(dom.records.iter().all(|r| r.contribution == 0.0));
    let p = contribution_profile(&model, &[trace], 4, 0).unwrap();
    assert_eq!(p.layers[0].degenerate_examples, 1);
    assert_eq!(p.layers[0].top_k, 0.0);
}

#[test]
fn event_scores_recomputed_by_hand() {
    let model = tiny_model(10);
    let traces = traces(&model, 10, 6);
    let events: Vec<EventRef> = (0..traces.len())
        .map(|ex| EventRef { example: ex, position: analysis_position(&traces[ex]).unwrap(), layer: ex % 3, token: (ex * 7 % 50) as u32 })
        .collect();
    let stats = event_score_stats(&model, &traces, &events, EventScoreMode::Dominant { k: 4 }).unwrap();
    let (mut mx, mut mn, mut mean, mut mabs) = (0.0, 0.0, 0.0, 0.0);
    for ev in &events {
        let dom = dominant_subupdates(&model, &traces[ev.example], ev.position, ev.layer, 4).unwrap();
        let e = model.weights().token_embedding.row(ev.token as usize);
        let s: Vec<f64> = dom
            .records
            .iter()
            .map(|r| {
                let v = model.weights().value_vector(ev.layer, r.index).unwrap();
                r.coefficient as f64 * e.iter().zip(v).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>()
            })
            .collect();
        mx += s.iter().cloned().fold(f64::MIN, f64::max);
        mn += s.iter().cloned().fold(f64::MAX, f64::min);
        mean += s.iter().sum::<f64>() / 4.0;
        mabs += s.iter().map(|x| x.abs()).sum::<f64>() / 4.0;
    }
    let n = events.len() as f64;
    for (a, b) in [(stats.max, mx / n), (stats.min, mn / n), (stats.mean, mean / n), (stats.mean_abs, mabs / n)] {
        assert!((a - b).abs() < 1e-4, "{a} vs {b}");
    }
    assert_eq!(stats.count, events.len());
    assert!(stats.min <= stats.mean && stats.mean <= stats.max);
    let random = event_score_stats(&model, &traces, &events, EventScoreMode::Random { k: 4, seed: 2 }).unwrap();
    assert_eq!(random, event_score_stats(&model, &traces, &events, EventScoreMode::Random { k: 4, seed: 2 }).unwrap());
    assert!(event_score_stats(&model, &traces, &[], EventScoreMode::Dominant { k: 4 }).is_err());
}

#[test]
fn zero_coefficients_score_zero_and_exclusions_empty_layers() {
    let model = tiny_model(11);
    let ivs: Vec<_> = (0..3).flat_map(|l| (0..32).map(move |i| Intervention::zero(l, i))).collect();
    let opts = ForwardOptions::traced().with_interventions(ivs);
    let trace = model.forward(&[4, 5], &opts).unwrap().trace.unwrap();
    let stats = per_layer_top_candidate_scores(&model, std::slice::from_ref(&trace), 3, ReadoutNorm::Raw, |_, _| false).unwrap();
    for s in &stats {
        let s = s.stats.unwrap();
        assert_eq!((s.max, s.mean, s.min, s.mean_abs), (0.0, 0.0, 0.0, 0.0));
    }
    let none = per_layer_top_candidate_scores(&model, &[trace], 3, ReadoutNorm::Raw, |l, _| l == 1).unwrap();
    assert!(none[1].stats.is_none() && none[0].stats.is_some());
}
