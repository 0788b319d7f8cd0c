//! Cluster value vectors by cosine distance, persist the model, and find
//! clusters that often carry extreme scores.

mod common;

use ffn_lens::cluster::{all_value_vectors, build_clusters, find_extreme_clusters, ClusterModel, ClusterParams, Linkage};
use ffn_lens::corpus::{bundled_corpus, trace_corpus};
use ffn_lens::lens::{project_vector, ReadoutNorm};

fn main() -> anyhow::Result<()> {
    let (model, tok) = common::model()?;
    let (keys, vectors) = all_value_vectors(&model);
    let k = (keys.len() / 8).max(2);
    let clusters = build_clusters(&keys, &vectors, model.config().hidden_dim, &ClusterParams::new(k, Linkage::Average))?;
    println!("{} vectors into {} clusters; largest has {}", keys.len(), clusters.num_clusters(), clusters.counts().iter().max().unwrap());

    let dir = std::env::temp_dir().join("ffn-lens-clusters-example");
    clusters.save(&dir)?;
    let reloaded = ClusterModel::load(&dir)?;
    assert_eq!(reloaded, clusters);

    for id in 0..3.min(clusters.num_clusters() as u32) {
        let centroid = clusters.centroid(id).expect("in range");
        let top = project_vector(&model, centroid, false)?;
        println!("cluster {id} ({} members): {}", clusters.counts()[id as usize], common::show(&tok, top.top(6)));
    }

    let sentences: Vec<String> = bundled_corpus().into_iter().take(50).collect();
    let traces = trace_corpus(&model, &tok, &sentences)?;
    let report = find_extreme_clusters(&model, &traces, &clusters, 1.0, 0.05, ReadoutNorm::Raw)?;
    println!("{} hits above 1.0; flagged clusters {:?}", report.total_hits, report.flagged);
    Ok(())
}
