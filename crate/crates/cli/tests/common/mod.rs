#![allow(dead_code)]

use std::path::Path;
use std::process::Command;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use bridgelab::models::Models;
use bridgelab::pipeline::RunStore;
use bridgelab_cli::service::{router, AppState};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bridgelab"))
}

/// Runs the binary and returns stdout, failing loudly on a nonzero exit.
pub fn run_bin(args: &[&str]) -> Vec<u8> {
    let out = bin().args(args).env_remove("RUST_LOG").output().unwrap();
    assert!(
        out.status.success(),
        "bridgelab {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out.stdout
}

/// The run as JSON with the wall-clock stamp removed.
pub fn strip_clock(bytes: &[u8]) -> Value {
    let mut v: Value = serde_json::from_slice(bytes).unwrap();
    v.as_object_mut().unwrap().remove("created_unix");
    v
}

pub struct ParityCase<'a> {
    pub class: &'a str,
    pub index: usize,
    pub target: &'a str,
    pub seed: u64,
    pub steps: usize,
}

/// Explains the same request through the binary and through the router,
/// each with its own run store, and returns both runs.
pub fn cli_and_service(
    models: &Arc<Models>,
    model_dir: &Path,
    case: &ParityCase,
) -> (Value, Value) {
    let cli_runs = tempfile::tempdir().unwrap();
    let svc_runs = tempfile::tempdir().unwrap();
    let index = case.index.to_string();
    let seed = case.seed.to_string();
    let steps = case.steps.to_string();
    let stdout = run_bin(&[
        "explain",
        "--models",
        model_dir.to_str().unwrap(),
        "--run-dir",
        cli_runs.path().to_str().unwrap(),
        "--class",
        case.class,
        "--index",
        &index,
        "--target",
        case.target,
        "--preset",
        "A",
        "--steps",
        &steps,
        "--seed",
        &seed,
    ]);

    let state = AppState {
        models: Some(models.clone()),
        store: RunStore::new(svc_runs.path()).unwrap(),
    };
    let body = json!({
        "image": {"reference": {"class": case.class, "index": case.index}},
        "region": {"kind": "automated"},
        "target": case.target,
        "preset": "A",
        "config": {"N": case.steps, "seed": case.seed}
    });
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .unwrap();
    let bytes = rt.block_on(async {
        let req = Request::builder()
            .method("POST")
            .uri("/explain")
            .header("content-type", "application/json")
            .body(Body::from(serde_json::to_vec(&body).unwrap()))
            .unwrap();
        let resp = router(state).oneshot(req).await.unwrap();
        assert_eq!(resp.status(), StatusCode::OK);
        resp.into_body()
            .collect()
            .await
            .unwrap()
            .to_bytes()
            .to_vec()
    });
    (strip_clock(&stdout), strip_clock(&bytes))
}

/// Generates a dataset through the binary and returns every file's bytes in path order.
pub fn gen_data_bytes(seed: u64, per_class: usize) -> Vec<(String, Vec<u8>)> {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    run_bin(&[
        "gen-data",
        "--out",
        out.to_str().unwrap(),
        "--per-class",
        &per_class.to_string(),
        "--seed",
        &seed.to_string(),
    ]);
    let mut files = Vec::new();
    let mut stack = vec![out.clone()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(&out).unwrap().to_string_lossy().into_owned();
                files.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}
