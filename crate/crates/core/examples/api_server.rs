//! Serve the JSON API over a model and query it once. Pass `--stay` after
//! the optional model directory to keep serving on port 7860.

mod common;

use std::net::SocketAddr;
use std::sync::Arc;

use ffn_lens::service::{router, AnnotationStore, AppState, ServiceOptions};

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let (model, tok) = tokio::task::spawn_blocking(common::model).await??;
    let store = AnnotationStore::open(&std::env::temp_dir().join("ffn-lens-api-example.jsonl"))?;
    let state = Arc::new(AppState::new(model, tok, store, ServiceOptions::default()));
    let stay = std::env::args().any(|a| a == "--stay");
    let port = if stay { 7860 } else { 0 };
    let listener = tokio::net::TcpListener::bind(SocketAddr::from(([127, 0, 0, 1], port))).await?;
    let addr = listener.local_addr()?;
    println!("listening on http://{addr}");
    let server = tokio::spawn(async move { axum::serve(listener, router(state)).await });
    if stay {
        server.await??;
        return Ok(());
    }
    let body = tokio::task::spawn_blocking(move || -> anyhow::Result<String> {
        let client = reqwest::blocking::Client::new();
        let projection = client.get(format!("http://{addr}/values/0/0/projection?k=5")).send()?.text()?;
        let search = client.post(format!("http://{addr}/search")).json(&serde_json::json!({"token": "the", "k": 50})).send()?.text()?;
        Ok(format!("{projection}\n{search}"))
    })
    .await??;
    println!("{body}");
    Ok(())
}
