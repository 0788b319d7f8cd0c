//! Saturation and elimination events over the bundled sentences, with the
//! scores of dominant against random sub-updates.

mod common;

use ffn_lens::analysis::{analysis_position, detect_elimination, detect_saturation, event_score_table, read_points, EventOptions};
use ffn_lens::corpus::{bundled_corpus, trace_corpus};

fn main() -> anyhow::Result<()> {
    let (model, tok) = common::model()?;
    let sentences: Vec<String> = bundled_corpus().into_iter().take(100).collect();
    let traces = trace_corpus(&model, &tok, &sentences)?;
    let opts = EventOptions::default();
    let (mut sat, mut elim) = (Vec::new(), Vec::new());
    for (ex, t) in traces.iter().enumerate() {
        let points = read_points(&model, t, analysis_position(t)?, opts.norm)?;
        sat.extend(detect_saturation(ex, &points, opts.stay_top));
        elim.extend(detect_elimination(ex, &points));
    }
    println!("{} sentences: {} saturation, {} elimination events", traces.len(), sat.len(), elim.len());
    if let Some(e) = sat.first() {
        println!("first saturation: sentence {} layer {} token {}", e.example, e.layer, common::show(&tok, &[e.reference_token]));
    }
    let table = event_score_table(&model, &traces, &sat, &elim, 10, 0)?;
    println!("{}", serde_json::to_string_pretty(&table)?);
    Ok(())
}
