mod common;

use axum::http::StatusCode;
use axum::Router;
use clap::Parser;
use common::*;
use gestureforge::cli::{run, to_sequences, Cli};
use gestureforge_core::landmark::write_sequences;
use gestureforge_core::modelfile::{self, Artifact};
use serde_json::{json, Value};

async fn new_project(app: &Router, classes: &[&str]) -> String {
    let (status, body) = call(
        app,
        "POST",
        "/api/v1/projects",
        Some(json!({ "name": "demo", "classes": classes })),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    body["id"].as_str().unwrap().to_string()
}

/// Two-class project with 10 samples per class and 10 background samples,
/// trained Frozen with seed 7; returns the downloaded model file.
async fn frozen_flow(dir: &std::path::Path) -> (Vec<u8>, Value) {
    let app = gestureforge::router(state(dir, None));
    let pid = new_project(&app, &[]).await;
    for class in ["victory", "rock"] {
        let (status, _) = call(
            &app,
            "POST",
            &format!("/api/v1/projects/{pid}/classes"),
            Some(json!({ "name": class })),
        )
        .await;
        assert_eq!(status, StatusCode::CREATED);
    }
    let data = samples(&["victory", "rock"], 10, 10, 3);
    let (status, out) = call(
        &app,
        "POST",
        &format!("/api/v1/projects/{pid}/samples"),
        Some(upload_body(&data, "s")),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{out}");
    assert_eq!(out["accepted"], 30);
    let (status, job) = call(
        &app,
        "POST",
        &format!("/api/v1/projects/{pid}/jobs"),
        Some(json!({ "regime": "frozen", "k": 10, "seed": 7, "epochs": 20 })),
    )
    .await;
    assert_eq!(status, StatusCode::ACCEPTED, "{job}");
    let job = wait_for_job(&app, job["id"].as_str().unwrap()).await;
    assert_eq!(job["state"], "succeeded", "{job}");
    assert_eq!(job["progress"]["epoch"], 20);
    let model_id = job["result_model_id"].as_str().unwrap();
    let (status, bytes) = call_raw(&app, "GET", &format!("/api/v1/models/{model_id}/file"), None, &[]).await;
    assert_eq!(status, StatusCode::OK);
    (bytes, job)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn health_and_project_listing() {
    let dir = tempfile::tempdir().unwrap();
    let app = gestureforge::router(state(dir.path(), None));
    let (status, body) = call(&app, "GET", "/api/v1/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");
    let pid = new_project(&app, &["ok", "call"]).await;
    let (_, list) = call(&app, "GET", "/api/v1/projects", None).await;
    assert_eq!(list["projects"].as_array().unwrap().len(), 1);
    let (status, p) = call(&app, "GET", &format!("/api/v1/projects/{pid}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(p["classes"], json!(["background", "ok", "call"]));
    assert_eq!(p["sample_counts"]["ok"], 0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn duplicate_class_names_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let app = gestureforge::router(state(dir.path(), None));
    let (status, body) = call(
        &app,
        "POST",
        "/api/v1/projects",
        Some(json!({ "name": "p", "classes": ["ok", "ok"] })),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"]["code"], "duplicate_class");
    let pid = new_project(&app, &["ok"]).await;
    for name in ["ok", "background"] {
        let (status, body) = call(
            &app,
            "POST",
            &format!("/api/v1/projects/{pid}/classes"),
            Some(json!({ "name": name })),
        )
        .await;
        assert_eq!(status, StatusCode::CONFLICT, "{body}");
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn invalid_frames_are_rejected_with_the_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let app = gestureforge::router(state(dir.path(), None));
    let pid = new_project(&app, &["ok"]).await;
    let data = samples(&["ok"], 1, 0, 1);
    let mut frame = frame_json(&data[0].0);
    frame["pts"].as_array_mut().unwrap().truncate(20);
    let body = json!({ "samples": [{ "class": "ok", "frame": frame }] });
    let (status, err) = call(&app, "POST", &format!("/api/v1/projects/{pid}/samples"), Some(body)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["error"]["code"], "invalid_frame");
    assert!(
        err["error"]["reason"]
            .as_str()
            .unwrap()
            .contains("expected 21 points, found 20"),
        "{err}"
    );

    let mut degenerate = frame_json(&data[0].0);
    let wrist = degenerate["pts"][0].clone();
    degenerate["pts"][9] = wrist;
    let body = json!({ "samples": [{ "class": "ok", "frame": degenerate }] });
    let (status, err) = call(&app, "POST", &format!("/api/v1/projects/{pid}/samples"), Some(body)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["error"]["code"], "degenerate_hand");

    let body = json!({ "samples": [{ "class": "nope", "frame": frame_json(&data[0].0) }] });
    let (status, err) = call(&app, "POST", &format!("/api/v1/projects/{pid}/samples"), Some(body)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["error"]["code"], "unknown_class");

    let (status, _) = call_raw(&app, "POST", &format!("/api/v1/projects/{pid}/samples"), None, &[]).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (_, p) = call(&app, "GET", &format!("/api/v1/projects/{pid}"), None).await;
    assert_eq!(p["sample_counts"]["ok"], 0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn unknown_ids_are_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let app = gestureforge::router(state(dir.path(), None));
    for (method, uri, code) in [
        ("GET", "/api/v1/projects/missing", "project_not_found"),
        ("GET", "/api/v1/jobs/missing", "job_not_found"),
        ("GET", "/api/v1/models/missing", "model_not_found"),
        ("GET", "/api/v1/models/missing/file", "model_not_found"),
    ] {
        let (status, body) = call(&app, method, uri, None).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
        assert_eq!(body["error"]["code"], code);
    }
    let (status, _) = call(
        &app,
        "POST",
        "/api/v1/projects/missing/jobs",
        Some(json!({ "regime": "frozen", "k": 1 })),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn static_token_is_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let app = gestureforge::router(state(dir.path(), Some("s3cret")));
    let (status, _) = call(&app, "GET", "/api/v1/health", None).await;
    assert_eq!(status, StatusCode::OK);
    let (status, body) = call_raw(&app, "GET", "/api/v1/projects", None, &[]).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED, "{}", String::from_utf8_lossy(&body));
    let (status, _) = call_raw(
        &app,
        "GET",
        "/api/v1/projects",
        None,
        &[("authorization", "Bearer wrong")],
    )
    .await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let (status, _) = call_raw(
        &app,
        "GET",
        "/api/v1/projects",
        None,
        &[("authorization", "Bearer s3cret")],
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let (status, _) = call_raw(
        &app,
        "GET",
        "/api/v1/projects",
        None,
        &[("x-gestureforge-token", "s3cret")],
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let (status, _) = call_raw(&app, "GET", "/api/v1/projects?token=s3cret", None, &[]).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn sample_upload_deduplicates_by_key() {
    let dir = tempfile::tempdir().unwrap();
    let app = gestureforge::router(state(dir.path(), None));
    let pid = new_project(&app, &["ok"]).await;
    let data = samples(&["ok"], 4, 0, 1);
    let uri = format!("/api/v1/projects/{pid}/samples");
    let (_, first) = call(&app, "POST", &uri, Some(upload_body(&data, "k"))).await;
    assert_eq!(
        (first["accepted"].clone(), first["duplicates"].clone()),
        (json!(4), json!(0))
    );
    let (_, again) = call(&app, "POST", &uri, Some(upload_body(&data, "k"))).await;
    assert_eq!(
        (again["accepted"].clone(), again["duplicates"].clone()),
        (json!(0), json!(4))
    );
    assert_eq!(again["sample_counts"]["ok"], 4);

    // A reopened store sees the same samples and keys.
    let app = gestureforge::router(state(dir.path(), None));
    let (_, p) = call(&app, "GET", &format!("/api/v1/projects/{pid}"), None).await;
    assert_eq!(p["sample_counts"]["ok"], 4);
    let (_, third) = call(&app, "POST", &uri, Some(upload_body(&data, "k"))).await;
    assert_eq!(third["duplicates"], 4);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn job_with_k_above_available_fails() {
    let dir = tempfile::tempdir().unwrap();
    let app = gestureforge::router(state(dir.path(), None));
    let pid = new_project(&app, &["ok", "call"]).await;
    let data = samples(&["ok", "call"], 5, 5, 2);
    call(
        &app,
        "POST",
        &format!("/api/v1/projects/{pid}/samples"),
        Some(upload_body(&data, "s")),
    )
    .await;
    let (status, job) = call(
        &app,
        "POST",
        &format!("/api/v1/projects/{pid}/jobs"),
        Some(json!({ "regime": "finetune", "k": 6 })),
    )
    .await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(job["state"], "queued");
    let job = wait_for_job(&app, job["id"].as_str().unwrap()).await;
    assert_eq!(job["state"], "failed");
    assert_eq!(job["error"]["code"], "insufficient_data");
    assert!(job["result_model_id"].is_null());

    let (status, err) = call(
        &app,
        "POST",
        &format!("/api/v1/projects/{pid}/jobs"),
        Some(json!({ "regime": "sideways", "k": 1 })),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["error"]["code"], "invalid_argument");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn repeated_flow_gives_bit_identical_model_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (first, job) = frozen_flow(a.path()).await;
    let (second, _) = frozen_flow(b.path()).await;
    assert!(!first.is_empty());
    assert_eq!(first, second);

    let Artifact::Gesture(model) = modelfile::from_bytes(&first).unwrap() else {
        panic!("expected a gesture model");
    };
    assert_eq!(model.label_map, vec!["background", "rock", "victory"]);
    assert_eq!(
        model.embedder,
        embedder(),
        "frozen training must not touch the embedder"
    );
    assert_eq!(job["spec"]["seed"], 7);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn api_and_cli_training_produce_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let (api_bytes, _) = frozen_flow(&dir.path().join("store")).await;

    let data_path = dir.path().join("data.lmk.jsonl");
    write_sequences(&data_path, &to_sequences(&samples(&["victory", "rock"], 10, 10, 3))).unwrap();
    let emb_path = dir.path().join("embedder.gfm");
    modelfile::save(&Artifact::Embedder(embedder()), &emb_path).unwrap();
    let out = dir.path().join("cli.gfm");
    let args = [
        "gestureforge",
        "train",
        "--data",
        data_path.to_str().unwrap(),
        "--embedder",
        emb_path.to_str().unwrap(),
        "--regime",
        "frozen",
        "--k",
        "10",
        "--seed",
        "7",
        "--epochs",
        "20",
        "--out",
        out.to_str().unwrap(),
    ]
    .map(String::from);
    tokio::task::spawn_blocking(move || run(Cli::parse_from(args)))
        .await
        .unwrap()
        .unwrap();
    assert_eq!(std::fs::read(&out).unwrap(), api_bytes);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn models_are_listed_and_evaluated() {
    let dir = tempfile::tempdir().unwrap();
    let (bytes, job) = frozen_flow(dir.path()).await;
    let app = gestureforge::router(state(dir.path(), None));
    let (_, list) = call(&app, "GET", "/api/v1/models", None).await;
    let models = list["models"].as_array().unwrap();
    assert_eq!(models.len(), 1, "models survive a restart");
    let id = models[0]["id"].as_str().unwrap();
    assert_eq!(models[0]["job_id"], job["id"]);
    assert_eq!(models[0]["size_bytes"], bytes.len());
    assert_eq!(models[0]["digest"].as_str().unwrap(), modelfile::file_digest(&bytes));

    let eval = samples(&["victory", "rock"], 5, 5, 11);
    let inline: Vec<Value> = eval
        .iter()
        .map(|(f, l)| json!({ "class": l, "frame": frame_json(f) }))
        .collect();
    let (status, report) = call(
        &app,
        "POST",
        &format!("/api/v1/models/{id}/eval"),
        Some(json!({ "samples": inline })),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{report}");
    assert_eq!(report["K"], 10);
    assert_eq!(report["regime"], "frozen");
    let c = report["confusion"]["counts"].as_array().unwrap();
    let total: u64 = c
        .iter()
        .flat_map(|r| r.as_array().unwrap())
        .map(|v| v.as_u64().unwrap())
        .sum();
    assert_eq!(total, 15);
    let s = report["ss_f1"].as_f64().unwrap();
    assert_eq!(s + report["complementary_ss_f1"].as_f64().unwrap(), 1.0);

    let pid = job["project_id"].as_str().unwrap();
    let (status, report) = call(
        &app,
        "POST",
        &format!("/api/v1/models/{id}/eval"),
        Some(json!({ "project_id": pid })),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{report}");
    let (status, _) = call(&app, "POST", &format!("/api/v1/models/{id}/eval"), Some(json!({}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let bad = json!({ "samples": [{ "class": "ok", "frame": frame_json(&eval[0].0) }] });
    let (status, err) = call(&app, "POST", &format!("/api/v1/models/{id}/eval"), Some(bad)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["error"]["code"], "label_mismatch");
}
