//! Record concept annotations for value vectors and report token coverage.

use ffn_lens::service::{coverage_report, AnnotationDraft, AnnotationStore, AnnotationTarget, ConceptClass, Pattern};

fn main() -> anyhow::Result<()> {
    let path = std::env::temp_dir().join(format!("ffn-lens-annotations-{}.jsonl", std::process::id()));
    let store = AnnotationStore::open(&path)?;
    let pattern = |members: Vec<usize>, description: &str, class| Pattern { members, description: description.into(), class, stopword: false };
    store.record(AnnotationDraft {
        target: AnnotationTarget::Value { layer: 10, index: 2421 },
        patterns: vec![pattern(vec![0, 1, 3, 4, 7], "places in Europe", ConceptClass::Semantic)],
        annotator: "demo".into(),
        timestamp: None,
    })?;
    store.record(AnnotationDraft {
        target: AnnotationTarget::RandomBaseline { sample: 0 },
        patterns: vec![],
        annotator: "demo".into(),
        timestamp: None,
    })?;

    let bad = AnnotationDraft {
        target: AnnotationTarget::Value { layer: 0, index: 0 },
        patterns: vec![pattern(vec![0, 1], "too few", ConceptClass::Names)],
        annotator: "demo".into(),
        timestamp: None,
    };
    println!("rejected: {}", store.record(bad).unwrap_err());

    let records = store.list(None)?;
    println!("{}", serde_json::to_string_pretty(&coverage_report(&records, false)?)?);
    std::fs::remove_file(&path)?;
    Ok(())
}
