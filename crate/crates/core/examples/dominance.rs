//! Top sub-updates by |m|·‖v‖, their contribution share per layer, and the
//! per-layer score of the current top candidate.

mod common;

use ffn_lens::analysis::{analysis_position, contribution_profile, dominant_subupdates, per_layer_top_candidate_scores};
use ffn_lens::corpus::{bundled_corpus, trace_corpus};
use ffn_lens::lens::ReadoutNorm;

fn main() -> anyhow::Result<()> {
    let (model, tok) = common::model()?;
    let sentences: Vec<String> = bundled_corpus().into_iter().take(50).collect();
    let traces = trace_corpus(&model, &tok, &sentences)?;

    let t = &traces[0];
    let dom = dominant_subupdates(&model, t, analysis_position(t)?, 0, 5)?;
    println!("\"{}\" layer 0:", sentences[0]);
    for r in &dom.records {
        println!("  v{} m={:+.3} |v|={:.3} share {:.3}", r.index, r.coefficient, r.value_norm, r.contribution);
    }

    let profile = contribution_profile(&model, &traces, 10, 0)?;
    for l in &profile.layers {
        println!("layer {:>2}: top-10 share {:.3}  random-10 share {:.3}", l.layer, l.top_k, l.random_k);
    }
    let scores = per_layer_top_candidate_scores(&model, &traces, 10, ReadoutNorm::Raw, |_, _| false)?;
    println!("{}", serde_json::to_string(&scores)?);
    Ok(())
}
