mod common;

use common::{random_inputs, random_vector, tiny_model, tiny_with};
use ffn_lens::assets::Activation;
use ffn_lens::math::{max_abs_diff, Matrix};
use ffn_lens::model::{
    generate, trace_records, write_sidecar, CoefficientStorage, Coefficients, Decoding, ExportOptions, ForwardOptions,
    Intervention, InterventionMode, Model,
};
use ffn_lens::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn brute_sum(model: &Model, layer: usize, m: &[f32]) -> Vec<f32> {
    let d = model.config().hidden_dim;
    let mut out = vec![0.0f64; d];
    for (i, &mi) in m.iter().enumerate() {
        let v = model.weights().value_vector(layer, i).unwrap();
        for j in 0..d {
            out[j] += mi as f64 * v[j] as f64;
        }
    }
    out.into_iter().map(|x| x as f32).collect()
}

#[test]
fn decomposition_identity_on_random_inputs() {
    let model = tiny_model(0);
    for ids in random_inputs(100, 50, 12, 1) {
        let out = model.forward(&ids, &ForwardOptions::traced()).unwrap();
        let trace = out.trace.unwrap();
        for (slot, layers) in trace.layers.iter().enumerate() {
            for (l, rec) in layers.iter().enumerate() {
                let b = &model.weights().layers[l].ffn_value_bias;
                let update: Vec<f32> = rec.ffn_output.iter().zip(b).map(|(o, b)| o - b).collect();
                let sum = brute_sum(&model, l, rec.coefficients.full().unwrap());
                assert!(max_abs_diff(&update, &sum) <= 1e-4, "pos {slot} layer {l}");
                let additive: Vec<f32> = rec.pre_ffn.iter().zip(&rec.ffn_output).map(|(x, o)| x + o).collect();
                assert_eq!(additive, rec.post_ffn);
                let lhs = model.project(&rec.post_ffn);
                let rhs: Vec<f32> = model.project(&rec.pre_ffn).iter().zip(model.project(&rec.ffn_output)).map(|(a, b)| a + b).collect();
                assert!(max_abs_diff(&lhs, &rhs) <= 1e-3);
            }
        }
    }
}

#[test]
fn zeroing_a_layer_leaves_only_the_bias() {
    let model = tiny_model(2);
    let ivs: Vec<_> = (0..32).map(|i| Intervention::set(1, i, 0.0)).collect();
    let out = model.forward(&[3, 4, 5], &ForwardOptions::traced().with_interventions(ivs)).unwrap();
    let trace = out.trace.unwrap();
    for pos in 0..3 {
        assert_eq!(trace.record(pos, 1).unwrap().ffn_output, model.weights().layers[1].ffn_value_bias);
    }
}

#[test]
fn relu_kills_negative_preactivations() {
    let model = tiny_with(3, |c| c.activation = Activation::Relu);
    let trace = model.forward(&[1, 2, 3, 4], &ForwardOptions::traced()).unwrap().trace.unwrap();
    let mut zeros = 0;
    for layers in &trace.layers {
        for rec in layers {
            let m = rec.coefficients.full().unwrap();
            assert!(m.iter().all(|&x| x >= 0.0));
            zeros += m.iter().filter(|&&x| x == 0.0).count();
        }
    }
    assert!(zeros > 0);
}

#[test]
fn ffn_apply_unit_combination_and_override() {
    let model = tiny_model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_vector(&mut rng, 16, 1.0);
    let mut ivs: Vec<_> = (0..32).map(|i| Intervention::zero(2, i)).collect();
    ivs[7] = Intervention::set(2, 7, 1.0);
    let out = model.ffn_apply(&x, 2, &ivs).unwrap();
    assert_eq!(out.update, model.weights().value_vector(2, 7).unwrap());
    let out = model.ffn_apply(&x, 2, &[Intervention::set(2, 5, 3.0)]).unwrap();
    assert_eq!(out.coefficients[5], 3.0);
    for _ in 0..20 {
        let x = random_vector(&mut rng, 16, 2.0);
        for l in 0..3 {
            let out = model.ffn_apply(&x, l, &[]).unwrap();
            let b = &model.weights().layers[l].ffn_value_bias;
            let update: Vec<f32> = out.output.iter().zip(b).map(|(o, b)| o - b).collect();
            assert!(max_abs_diff(&update, &brute_sum(&model, l, &out.coefficients)) <= 1e-4);
        }
    }
    assert!(matches!(model.ffn_apply(&x, 3, &[]), Err(Error::Index(_))));
}

#[test]
fn ffn_apply_matches_traced_block() {
    let model = tiny_model(6);
    let trace = model.forward(&[9, 8, 7, 6], &ForwardOptions::traced()).unwrap().trace.unwrap();
    for l in 0..3 {
        let rec = trace.record(3, l).unwrap();
        let out = model.ffn_apply(&rec.pre_ffn, l, &[]).unwrap();
        assert!(max_abs_diff(&out.output, &rec.ffn_output) <= 1e-5);
    }
}

#[test]
fn intervention_locality() {
    let model = tiny_model(7);
    let ids = [1, 5, 9, 13, 17];
    let base = model.forward(&ids, &ForwardOptions::traced()).unwrap().trace.unwrap();
    let opts = ForwardOptions::traced().with_interventions(vec![Intervention::set(2, 3, 5.0)]);
    let steered = model.forward(&ids, &opts).unwrap().trace.unwrap();
    for pos in 0..ids.len() {
        for l in 0..2 {
            assert_eq!(base.record(pos, l).unwrap(), steered.record(pos, l).unwrap());
        }
        assert_eq!(steered.record(pos, 2).unwrap().coefficients.get(3), 5.0);
    }
}

#[test]
fn sparse_storage_keeps_heaviest_entries() {
    let model = tiny_model(8);
    let full = model.forward(&[2, 4, 6], &ForwardOptions::traced()).unwrap().trace.unwrap();
    let opts = ForwardOptions { coefficient_storage: CoefficientStorage::TopK(4), ..ForwardOptions::traced() };
    let sparse = model.forward(&[2, 4, 6], &opts).unwrap().trace.unwrap();
    let m = full.record(2, 1).unwrap().coefficients.full().unwrap().to_vec();
    let norms = model.value_norms(1);
    let mut order: Vec<usize> = (0..32).collect();
    order.sort_by(|&a, &b| (m[b].abs() * norms[b]).total_cmp(&(m[a].abs() * norms[a])).then(a.cmp(&b)));
    match &sparse.record(2, 1).unwrap().coefficients {
        Coefficients::Sparse { dim, entries } => {
            assert_eq!(*dim, 32);
            let idx: Vec<usize> = entries.iter().map(|e| e.0 as usize).collect();
            assert_eq!(idx, order[..4]);
        }
        other => panic!("expected sparse storage, got {other:?}"),
    }
}

#[test]
fn sequence_too_long_and_bad_ids() {
    let model = tiny_model(0);
    let ids = vec![1u32; 65];
    assert!(matches!(model.forward(&ids, &ForwardOptions::default()), Err(Error::SequenceTooLong { len: 65, max: 64 })));
    assert!(model.forward(&[50], &ForwardOptions::default()).is_err());
    assert!(generate(&model, &[1; 60], 6, Decoding::Greedy, &ForwardOptions::default()).is_err());
    assert!(generate(&model, &[1; 60], 5, Decoding::Greedy, &ForwardOptions::default()).is_ok());
}

#[test]
fn numeric_instability_names_the_layer() {
    let mut w = ffn_lens::assets::build_tiny_random_model(0, &ffn_lens::assets::ModelConfig::tiny()).unwrap();
    w.layers[1].ffn_value_bias[0] = f32::INFINITY;
    let model = Model::new(w);
    assert!(matches!(model.forward(&[1, 2], &ForwardOptions::default()), Err(Error::NumericInstability { layer: 1 })));
}

#[test]
fn generation_determinism_and_noops() {
    let model = tiny_model(9);
    let prompt = [4, 8, 15];
    let a = generate(&model, &prompt, 20, Decoding::Greedy, &ForwardOptions::default()).unwrap();
    assert_eq!(a, generate(&model, &prompt, 20, Decoding::Greedy, &ForwardOptions::default()).unwrap());
    let noop: Vec<_> = (0..3)
        .map(|l| Intervention { layer: l, value_index: l, mode: InterventionMode::AddCoefficient { delta: 0.0 } })
        .collect();
    let b = generate(&model, &prompt, 20, Decoding::Greedy, &ForwardOptions::default().with_interventions(noop.clone())).unwrap();
    let c = generate(&model, &prompt, 20, Decoding::Greedy, &ForwardOptions::default().with_interventions(Vec::new())).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
    let d = Decoding::TopK { k: 10, seed: 42 };
    let s1 = generate(&model, &prompt, 20, d, &ForwardOptions::default()).unwrap();
    assert_eq!(s1, generate(&model, &prompt, 20, d, &ForwardOptions::default().with_interventions(noop)).unwrap());
}

#[test]
fn masked_token_is_never_sampled() {
    let model = tiny_model(10);
    let target = {
        // the token greedy decoding likes most, so the mask has work to do
        let out = model.forward(&[1], &ForwardOptions::default()).unwrap();
        ffn_lens::math::argmax(out.logits.row(0)) as u32
    };
    let mut mask = vec![0.0; 50];
    mask[target as usize] = f32::NEG_INFINITY;
    let opts = ForwardOptions { logit_mask: Some(mask), ..ForwardOptions::default() };
    let mut emitted = 0;
    for seed in 0..50 {
        let out = generate(&model, &[1, 2, 3], 20, Decoding::TopK { k: 50, seed }, &opts).unwrap();
        emitted += out.len();
        assert!(!out.contains(&target));
    }
    assert_eq!(emitted, 1000);
}

#[test]
fn export_records_and_sidecar() {
    let model = tiny_model(11);
    let trace = model.forward(&[1, 2, 3], &ForwardOptions::traced()).unwrap().trace.unwrap();
    let mut recs = trace_records(&model, &trace, 0, ExportOptions { top_k: 10, top_tokens: 5 });
    assert_eq!(recs.len(), 9);
    assert_eq!(recs[0].top_coefficients.len(), 10);
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_sidecar(&trace, &mut recs, &dir.path().join("states.bin")).unwrap();
    assert_eq!(manifest.rows, 9);
    let bytes = std::fs::read(dir.path().join("states.bin")).unwrap();
    assert_eq!(bytes.len(), 9 * 3 * 16 * 4);
    let floats: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    let row4 = Matrix::from_vec(9, 48, floats);
    let rec = trace.record(recs[4].position, recs[4].layer).unwrap();
    assert_eq!(&row4.row(4)[32..], &rec.post_ffn[..]);
}
