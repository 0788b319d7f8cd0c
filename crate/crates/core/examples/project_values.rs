//! Project value vectors into the vocabulary, look up a token, and compare
//! raw against final-LayerNorm projections.

mod common;

use ffn_lens::lens::{ln_iou_report, project_vector, ProjectionIndex};

fn main() -> anyhow::Result<()> {
    let (model, tok) = common::model()?;
    let last = model.config().num_layers - 1;
    for index in 0..3 {
        let v = model.weights().value_vector(last, index)?;
        let raw = project_vector(&model, v, false)?;
        let ln = project_vector(&model, v, true)?;
        println!("v[{last}][{index}] raw: {}", common::show(&tok, raw.top(8)));
        println!("v[{last}][{index}] ln : {}", common::show(&tok, ln.top(8)));
    }

    let index = ProjectionIndex::build(&model, 50);
    let token = tok.token_id(" the".as_bytes()).expect("in vocabulary");
    let hits = index.search(token, 50);
    println!("' the' is in the top 50 of {} value vectors", hits.len());
    for h in hits.iter().take(5) {
        println!("  layer {} index {} rank {}", h.layer, h.index, h.rank);
    }

    let report = ln_iou_report(&model, 30, 200, 0)?;
    println!("top-30 IoU raw vs LN: value vectors {:.3}, random vectors {:.3}", report.mean_iou, report.random_mean_iou);
    Ok(())
}
