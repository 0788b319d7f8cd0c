mod common;

use common::{naive_argmax, naive_project, random_inputs, random_vector, tiny_model};
use ffn_lens::lens::{
    distribution_at, ln_iou_batch, project_vector, random_vector_sample, subupdate_token_score, value_vector_moments,
    ReadPoint, ReadoutNorm,
};
use ffn_lens::math::argmax;
use ffn_lens::model::{ForwardOptions, Intervention};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn zero_vector_ranks_by_id() {
    let model = tiny_model(0);
    let r = project_vector(&model, &[0.0; 16], false).unwrap();
    assert!(r.scores.iter().all(|&s| s == 0.0));
    assert_eq!(r.order, (0..50).collect::<Vec<u32>>());
    assert!(project_vector(&model, &[0.0; 15], false).is_err());
}

#[test]
fn embedding_row_projects_to_itself_when_self_similar() {
    let model = tiny_model(1);
    let e = &model.weights().token_embedding;
    for w in 0..50 {
        let scores = naive_project(&model, e.row(w));
        // brute force: w must be the exhaustive argmax exactly when e_w·e_w beats every e_u·e_w
        let self_best = (0..50).all(|u| u == w || scores[w] > scores[u]);
        let top = project_vector(&model, e.row(w), false).unwrap().order[0];
        assert_eq!(top as usize == w, self_best, "token {w}");
    }
}

#[test]
fn ranking_is_scale_invariant() {
    let model = tiny_model(2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        let v = random_vector(&mut rng, 16, 1.0);
        let scaled: Vec<f32> = v.iter().map(|x| x * 4.0).collect();
        assert_eq!(project_vector(&model, &v, false).unwrap().order, project_vector(&model, &scaled, false).unwrap().order);
    }
}

#[test]
fn distributions_are_normalised_and_consistent() {
    let model = tiny_model(3);
    for ids in random_inputs(30, 50, 10, 4) {
        let out = model.forward(&ids, &ForwardOptions::traced()).unwrap();
        let trace = out.trace.unwrap();
        let last = ids.len() - 1;
        for layer in 0..3 {
            for point in [ReadPoint::PreFfn, ReadPoint::PostFfn, ReadPoint::Final] {
                for norm in [ReadoutNorm::Raw, ReadoutNorm::FinalLn] {
                    let d = distribution_at(&model, &trace, last, layer, point, norm).unwrap();
                    let total: f64 = d.probabilities.iter().map(|&p| p as f64).sum();
                    assert!((total - 1.0).abs() <= 1e-5);
                }
            }
        }
        let y = distribution_at(&model, &trace, last, 2, ReadPoint::Final, ReadoutNorm::Raw).unwrap();
        assert_eq!(y.argmax() as usize, argmax(out.logits.row(last)));
        // the last post-FFN state through the final LN is the model output
        let through_ln = distribution_at(&model, &trace, last, 2, ReadPoint::PostFfn, ReadoutNorm::FinalLn).unwrap();
        assert_eq!(through_ln.logits, out.logits.row(last));
    }
}

#[test]
fn zero_ffn_output_keeps_distribution() {
    let mut w = ffn_lens::assets::build_tiny_random_model(5, &ffn_lens::assets::ModelConfig::tiny()).unwrap();
    w.layers[1].ffn_value_bias.iter_mut().for_each(|b| *b = 0.0);
    let model = ffn_lens::Model::new(w);
    let ivs: Vec<_> = (0..32).map(|i| Intervention::zero(1, i)).collect();
    let trace = model.forward(&[1, 2, 3], &ForwardOptions::traced().with_interventions(ivs)).unwrap().trace.unwrap();
    let pre = distribution_at(&model, &trace, 2, 1, ReadPoint::PreFfn, ReadoutNorm::Raw).unwrap();
    let post = distribution_at(&model, &trace, 2, 1, ReadPoint::PostFfn, ReadoutNorm::Raw).unwrap();
    assert_eq!(pre, post);
}

#[test]
fn token_score_is_linear_in_the_coefficient() {
    let model = tiny_model(6);
    for w in 0..50 {
        assert_eq!(subupdate_token_score(&model, 1, 3, 0.0, w).unwrap(), 0.0);
        let a = subupdate_token_score(&model, 1, 3, 2.0, w).unwrap();
        let b = subupdate_token_score(&model, 1, 3, 0.5, w).unwrap();
        assert!((a - 4.0 * b).abs() <= 1e-6 * a.abs().max(1.0));
    }
    assert!(subupdate_token_score(&model, 3, 0, 1.0, 0).is_err());
}

#[test]
fn random_sample_matches_empirical_moments() {
    let model = tiny_model(7);
    let (mean, std) = value_vector_moments(&model);
    let sample = random_vector_sample(&model, 10_000, 11);
    assert_eq!(sample, random_vector_sample(&model, 10_000, 11));
    assert!(random_vector_sample(&model, 0, 11).is_empty());
    for j in 0..16 {
        let m: f64 = sample.iter().map(|v| v[j] as f64).sum::<f64>() / 1e4;
        let s = (sample.iter().map(|v| (v[j] as f64 - m).powi(2)).sum::<f64>() / 1e4).sqrt();
        // relative for the spread; the mean is compared on the std scale since it sits near 0
        assert!((s - std[j] as f64).abs() <= 0.05 * std[j] as f64, "dim {j} std");
        assert!((m - mean[j] as f64).abs() <= 0.05 * std[j] as f64, "dim {j} mean");
    }
}

#[test]
fn ln_iou_edges() {
    let model = tiny_model(8);
    let v = model.weights().value_vector(0, 0).unwrap().to_vec();
    let iou = ln_iou_batch(&model, &v, 5)[0];
    assert!((0.0..=1.0).contains(&iou));
    // with all 50 tokens in both sets the overlap is total
    assert_eq!(ln_iou_batch(&model, &v, 50)[0], 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    /// Injecting one sub-update shifts every logit gap by m (e_w1 − e_w2)·v.
    #[test]
    fn logit_gap_shift_is_exact(seed in 0u64..1_000_000, layer in 0usize..3, index in 0usize..32,
                                m in -5.0f32..5.0, w1 in 0u32..50, w2 in 0u32..50) {
        let model = tiny_model(9);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_vector(&mut rng, 16, 2.0);
        let v = model.weights().value_vector(layer, index).unwrap();
        let shifted: Vec<f32> = x.iter().zip(v).map(|(a, b)| a + m * b).collect();
        let before = naive_project(&model, &x);
        let after = naive_project(&model, &shifted);
        let e = &model.weights().token_embedding;
        let predicted: f64 = e.row(w1 as usize).iter().zip(e.row(w2 as usize)).zip(v)
            .map(|((a, b), c)| (*a as f64 - *b as f64) * *c as f64).sum::<f64>() * m as f64;
        let observed = (after[w1 as usize] - after[w2 as usize]) - (before[w1 as usize] - before[w2 as usize]);
        prop_assert!((observed - predicted).abs() <= 1e-5 * (1.0 + predicted.abs()));
        // direction of one token's logit follows the sign of e_w·(m v)
        let score = subupdate_token_score(&model, layer, index, m, w1).unwrap() as f64;
        let delta = after[w1 as usize] - before[w1 as usize];
        prop_assert!((delta - score).abs() <= 1e-5 * (1.0 + score.abs()));
        let _ = naive_argmax(&after);
    }
}
