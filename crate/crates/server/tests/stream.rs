mod common;

use std::sync::Arc;
use std::time::Instant;

use common::*;
use futures_util::{SinkExt, StreamExt};
use gestureforge::stream::{StreamReply, CLOSE_MODEL_NOT_FOUND};
use gestureforge::training::{train_kshot, HeadOptions};
use gestureforge::AppState;
use gestureforge_core::gesture::{Regime, TrainSpec};
use serde_json::{json, Value};
use tokio_tungstenite::tungstenite::protocol::frame::coding::CloseCode;
use tokio_tungstenite::tungstenite::Message;

const CLASSES: [&str; 2] = ["victory", "open_palm"];

async fn serve(state: Arc<AppState>) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, gestureforge::router(state)).await.unwrap() });
    format!("ws://{addr}/api/v1/stream")
}

/// A server holding one model trained on two gestures plus background.
async fn server_with_model(dir: &std::path::Path, token: Option<&str>) -> (String, String) {
    let state = state(dir, token);
    let data = samples(&CLASSES, 60, 60, 5);
    let spec = TrainSpec::new(Regime::RandomInit, 50, 1);
    let model = train_kshot(
        &state.embedder.randomize(1),
        &data,
        None,
        &spec,
        &HeadOptions::default(),
        &mut |_| {},
    )
    .unwrap();
    let meta = state.store.add_model(model, None, None).unwrap();
    (serve(state).await, meta.id)
}

fn frame_msg(frame: &gestureforge_core::landmark::FrameLandmarks, t_ms: i64) -> Message {
    let mut v = frame_json(frame);
    v["t_ms"] = json!(t_ms);
    Message::text(v.to_string())
}

fn parse(msg: Message) -> Value {
    serde_json::from_str(msg.to_text().unwrap()).unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn unknown_model_closes_with_code() {
    let dir = tempfile::tempdir().unwrap();
    let url = serve(state(dir.path(), None)).await;
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("{url}/nope")).await.unwrap();
    match ws.next().await.unwrap().unwrap() {
        Message::Close(Some(frame)) => {
            assert_eq!(frame.code, CloseCode::from(CLOSE_MODEL_NOT_FOUND));
            assert!(frame.reason.starts_with("model_not_found"));
        }
        other => panic!("expected close, got {other:?}"),
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn stream_requires_token_when_configured() {
    let dir = tempfile::tempdir().unwrap();
    let (url, id) = server_with_model(dir.path(), Some("tok")).await;
    assert!(tokio_tungstenite::connect_async(format!("{url}/{id}")).await.is_err());
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("{url}/{id}?token=tok"))
        .await
        .unwrap();
    let data = samples(&CLASSES, 1, 0, 8);
    ws.send(frame_msg(&data[0].0, 0)).await.unwrap();
    assert!(parse(ws.next().await.unwrap().unwrap())["top"].is_array());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn bad_frames_get_error_frames_and_the_connection_survives() {
    let dir = tempfile::tempdir().unwrap();
    let (url, id) = server_with_model(dir.path(), None).await;
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("{url}/{id}")).await.unwrap();
    let data = samples(&CLASSES, 2, 0, 9);

    ws.send(frame_msg(&data[0].0, 100)).await.unwrap();
    let ok = parse(ws.next().await.unwrap().unwrap());
    assert_eq!(ok["t_ms"], 100);

    ws.send(frame_msg(&data[1].0, 50)).await.unwrap();
    let err = parse(ws.next().await.unwrap().unwrap());
    assert_eq!(err["error"]["code"], "out_of_order");
    assert_eq!(err["t_ms"], 50);

    ws.send(Message::text("{not json")).await.unwrap();
    assert_eq!(
        parse(ws.next().await.unwrap().unwrap())["error"]["code"],
        "invalid_json"
    );

    let mut short = frame_json(&data[1].0);
    short["pts"].as_array_mut().unwrap().pop();
    short["t_ms"] = json!(150);
    ws.send(Message::text(short.to_string())).await.unwrap();
    assert_eq!(
        parse(ws.next().await.unwrap().unwrap())["error"]["code"],
        "invalid_frame"
    );

    ws.send(frame_msg(&data[1].0, 200)).await.unwrap();
    let reply: StreamReply = serde_json::from_value(parse(ws.next().await.unwrap().unwrap())).unwrap();
    assert_eq!(reply.t_ms, 200);
    assert_eq!(reply.top.len(), 3);
    let total: f64 = reply.top.iter().map(|r| r.p).sum();
    assert!((total - 1.0).abs() < 1e-12);
    assert!(reply.top.windows(2).all(|w| w[0].p >= w[1].p));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn two_hand_frames_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let (url, id) = server_with_model(dir.path(), None).await;
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("{url}/{id}")).await.unwrap();
    let data = samples(&CLASSES, 2, 0, 10);
    let msg = json!({ "t_ms": 5, "hands": [frame_json(&data[0].0), frame_json(&data[1].0)] });
    ws.send(Message::text(msg.to_string())).await.unwrap();
    let reply = parse(ws.next().await.unwrap().unwrap());
    assert_eq!(reply["t_ms"], 5);
    assert_eq!(reply["top"].as_array().unwrap().len(), 3);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn burst_replies_arrive_in_request_order() {
    let dir = tempfile::tempdir().unwrap();
    let (url, id) = server_with_model(dir.path(), None).await;
    let (ws, _) = tokio_tungstenite::connect_async(format!("{url}/{id}")).await.unwrap();
    let (mut tx, mut rx) = ws.split();
    let data = samples(&CLASSES, 500, 0, 12);
    let frames: Vec<_> = data.iter().map(|(f, _)| f.clone()).collect();
    let sender = tokio::spawn(async move {
        for (i, f) in frames.iter().enumerate() {
            tx.send(frame_msg(f, i as i64 * 10)).await.unwrap();
        }
        tx
    });
    for i in 0..1000 {
        let reply = parse(rx.next().await.unwrap().unwrap());
        assert_eq!(reply["t_ms"], i * 10, "reply {i} out of order");
    }
    let _tx = sender.await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn scripted_stream_is_accurate_and_real_time() {
    let dir = tempfile::tempdir().unwrap();
    let (url, id) = server_with_model(dir.path(), None).await;
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("{url}/{id}")).await.unwrap();
    let script = samples(&["victory"], 300, 0, 77);
    let start = Instant::now();
    let mut correct = 0;
    for (i, (f, label)) in script.iter().enumerate() {
        ws.send(frame_msg(f, i as i64 * 33)).await.unwrap();
        let reply = parse(ws.next().await.unwrap().unwrap());
        if reply["top"][0]["label"] == label.as_str() {
            correct += 1;
        }
    }
    let fps = script.len() as f64 / start.elapsed().as_secs_f64();
    assert!(
        correct as f64 >= 0.95 * script.len() as f64,
        "top-1 correct {correct}/300"
    );
    assert!(fps >= 30.0, "{fps:.1} frames/s");
}
