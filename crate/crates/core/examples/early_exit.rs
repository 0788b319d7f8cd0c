//! Build the cluster-set early-exit rule on traced sentences and evaluate it
//! over several train/held-out splits.

mod common;

use ffn_lens::analysis::EventOptions;
use ffn_lens::cluster::{all_value_vectors, build_clusters, ClusterParams, Linkage};
use ffn_lens::corpus::{bundled_corpus, trace_corpus};
use ffn_lens::exit::{evaluate_seeds, exit_example, ExitVariant};

fn main() -> anyhow::Result<()> {
    let (model, tok) = common::model()?;
    let (keys, vectors) = all_value_vectors(&model);
    let clusters = build_clusters(&keys, &vectors, model.config().hidden_dim, &ClusterParams::new(20, Linkage::Average))?;
    let traces = trace_corpus(&model, &tok, &bundled_corpus())?;
    let examples = traces
        .iter()
        .enumerate()
        .map(|(id, t)| exit_example(&model, t, &clusters, id, 10, EventOptions::default()))
        .collect::<ffn_lens::Result<Vec<_>>>()?;
    let saturating = examples.iter().filter(|e| e.saturation_layer.is_some()).count();
    println!("{} examples, {saturating} saturate before the last layer", examples.len());
    for variant in [ExitVariant::Simple, ExitVariant::Strict] {
        let r = evaluate_seeds(&examples, model.config().num_layers, 10, &[0, 1, 2, 3, 4], variant)?;
        println!(
            "{variant:?}: accuracy {:.3} ± {:.3}, saved layers {:.2} ± {:.2}",
            r.accuracy_mean, r.accuracy_std, r.saved_layers_mean, r.saved_layers_std
        );
    }
    Ok(())
}
