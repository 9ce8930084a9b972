#![allow(dead_code)]

use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use gestureforge::store::Store;
use gestureforge::AppState;
use gestureforge_core::embedder::{EmbeddingConfig, EmbeddingModel};
use gestureforge_core::gesture::LabeledFrame;
use gestureforge_core::landmark::FrameRecord;
use gestureforge_core::synth::{gen_gesture_dataset, GenSpec};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

pub fn embedder() -> EmbeddingModel {
    EmbeddingModel::new(EmbeddingConfig::default(), 0).unwrap()
}

pub fn state(dir: &std::path::Path, token: Option<&str>) -> Arc<AppState> {
    AppState::new(Store::open(dir).unwrap(), embedder(), 1, token.map(String::from))
}

pub fn samples(classes: &[&str], per_class: usize, background: usize, seed: u64) -> Vec<LabeledFrame> {
    let gen = GenSpec {
        seed,
        ..GenSpec::default()
    };
    gen_gesture_dataset(classes, per_class, background, &gen).unwrap()
}

pub fn frame_json(frame: &gestureforge_core::landmark::FrameLandmarks) -> Value {
    serde_json::to_value(FrameRecord::from_frame(frame)).unwrap()
}

pub fn upload_body(data: &[LabeledFrame], key_prefix: &str) -> Value {
    let samples: Vec<Value> = data
        .iter()
        .enumerate()
        .map(|(i, (f, l))| json!({ "class": l, "key": format!("{key_prefix}-{i}"), "frame": frame_json(f) }))
        .collect();
    json!({ "samples": samples })
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = call_raw(app, method, uri, body, &[]).await;
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or(Value::Null)
    };
    (status, v)
}

pub async fn call_raw(
    app: &Router,
    method: &str,
    uri: &str,
    body: Option<Value>,
    headers: &[(&str, &str)],
) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    for (k, v) in headers {
        req = req.header(*k, *v);
    }
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

/// Polls a job until it leaves the queued/running states.
pub async fn wait_for_job(app: &Router, id: &str) -> Value {
    for _ in 0..2400 {
        let (status, job) = call(app, "GET", &format!("/api/v1/jobs/{id}"), None).await;
        assert_eq!(status, StatusCode::OK);
        if job["state"] == "succeeded" || job["state"] == "failed" {
            return job;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("job {id} did not finish");
}
