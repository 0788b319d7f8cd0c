use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::math;

use super::forward::Model;
use super::trace::ResidualTrace;

/// One line of a trace export: a single (example, position, layer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub example: usize,
    pub position: usize,
    pub layer: usize,
    pub token_id: u32,
    pub pre_ffn_norm: f32,
    pub ffn_output_norm: f32,
    pub post_ffn_norm: f32,
    /// `(index, m_i)` of the largest `|m_i|·‖v_i‖`, descending.
    pub top_coefficients: Vec<(u32, f32)>,
    /// Top candidates of `E·x^ℓ`.
    pub pre_ffn_top_tokens: Vec<u32>,
    /// Top candidates of `E·x̂^ℓ`.
    pub post_ffn_top_tokens: Vec<u32>,
    /// Row in the binary sidecar, when one is written.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sidecar_row: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct ExportOptions {
    pub top_k: usize,
    pub top_tokens: usize,
}

impl Default for ExportOptions {
    fn default() -> Self {
        Self { top_k: 10, top_tokens: 5 }
    }
}

pub fn trace_records(model: &Model, trace: &ResidualTrace, example: usize, opts: ExportOptions) -> Vec<TraceRecord> {
    let mut out = Vec::new();
    for (slot, &position) in trace.positions.iter().enumerate() {
        for (layer, rec) in trace.layers[slot].iter().enumerate() {
            let norms = model.value_norms(layer);
            let stored = rec.coefficients.stored();
            let weights: Vec<f32> = stored.iter().map(|&(i, m)| m.abs() * norms[i]).collect();
            let top_coefficients = math::top_k_indices(&weights, opts.top_k)
                .into_iter()
                .map(|j| (stored[j].0 as u32, stored[j].1))
                .collect();
            let top = |v: &[f32]| -> Vec<u32> {
                math::top_k_indices(&model.project(v), opts.top_tokens).into_iter().map(|i| i as u32).collect()
            };
            out.push(TraceRecord {
                example,
                position,
                layer,
                token_id: trace.token_ids[position],
                pre_ffn_norm: math::norm(&rec.pre_ffn),
                ffn_output_norm: math::norm(&rec.ffn_output),
                post_ffn_norm: math::norm(&rec.post_ffn),
                top_coefficients,
                pre_ffn_top_tokens: top(&rec.pre_ffn),
                post_ffn_top_tokens: top(&rec.post_ffn),
                sidecar_row: None,
            });
        }
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Describes a raw sidecar of little-endian f32 rows. Each row holds
/// `x^ℓ`, `o^ℓ` and `x̂^ℓ` back to back (`3·d` floats).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarManifest {
    pub file: PathBuf,
    pub dtype: String,
    pub hidden_dim: usize,
    pub rows: usize,
    pub row_layout: Vec<String>,
}

/// Writes full state vectors for `records` (which must come from `trace`) into
/// `bin_path` and fills their `sidecar_row`.
pub fn write_sidecar(trace: &ResidualTrace, records: &mut [TraceRecord], bin_path: &Path) -> Result<SidecarManifest> {
    let mut w = BufWriter::new(File::create(bin_path)?);
    let mut hidden_dim = 0;
    for (row, r) in records.iter_mut().enumerate() {
        let rec = trace.record(r.position, r.layer)?;
        hidden_dim = rec.pre_ffn.len();
        for v in [&rec.pre_ffn, &rec.ffn_output, &rec.post_ffn] {
            for x in v.iter() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        r.sidecar_row = Some(row);
    }
    w.flush()?;
    Ok(SidecarManifest {
        file: bin_path.file_name().map(PathBuf::from).unwrap_or_default(),
        dtype: "f32le".into(),
        hidden_dim,
        rows: records.len(),
        row_layout: vec!["pre_ffn".into(), "ffn_output".into(), "post_ffn".into()],
    })
}
