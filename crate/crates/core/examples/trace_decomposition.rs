//! Trace one sentence and read an FFN output as a sum of weighted value vectors.

mod common;

use ffn_lens::math;
use ffn_lens::model::{trace_records, ExportOptions};
use ffn_lens::ForwardOptions;

fn main() -> anyhow::Result<()> {
    let (model, tok) = common::model()?;
    let ids = tok.encode("The capital of France is");
    let trace = model.forward(&ids, &ForwardOptions::traced())?.trace.expect("tracing enabled");
    let pos = trace.last_position().expect("non-empty");
    let layer = model.config().num_layers / 2;
    let rec = trace.record(pos, layer)?;
    let m = rec.coefficients.full().expect("full coefficients");

    // o = Σ m_i v_i + b_V
    let lw = &model.weights().layers[layer];
    let mut sum = lw.ffn_value_bias.clone();
    for (i, &mi) in m.iter().enumerate() {
        for (s, v) in sum.iter_mut().zip(lw.value_vector(i)) {
            *s += mi * v;
        }
    }
    println!("layer {layer}: max |o - (Σ m·v + b)| = {:.2e}", math::max_abs_diff(&sum, &rec.ffn_output));

    for r in trace_records(&model, &trace, 0, ExportOptions::default()).iter().filter(|r| r.position == pos) {
        println!(
            "layer {:>2}  |x|={:7.2} |o|={:7.2}  top (i, m) {:?}  pre {}  post {}",
            r.layer,
            r.pre_ffn_norm,
            r.ffn_output_norm,
            &r.top_coefficients[..3],
            common::show(&tok, &r.pre_ffn_top_tokens[..1]),
            common::show(&tok, &r.post_ffn_top_tokens[..1]),
        );
    }
    Ok(())
}
