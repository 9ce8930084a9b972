//! Live classification over a WebSocket. Frames are handled one at a time in
//! arrival order, so replies always come back in request order.

use std::sync::Arc;
use std::time::Instant;

use axum::extract::ws::{CloseFrame, Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::response::Response;
use gestureforge_core::gesture::GestureModel;
use gestureforge_core::landmark::FrameRecord;
use serde::{Deserialize, Serialize};

use crate::api::checked_frame;
use crate::AppState;

pub const CLOSE_MODEL_NOT_FOUND: u16 = 4404;

/// One incoming message: a single hand, or both hands of one frame.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum StreamFrame {
    Hands { t_ms: i64, hands: Vec<FrameRecord> },
    Single(FrameRecord),
}

impl StreamFrame {
    pub fn t_ms(&self) -> i64 {
        match self {
            StreamFrame::Hands { t_ms, .. } => *t_ms,
            StreamFrame::Single(r) => r.t_ms,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Ranked {
    pub label: String,
    pub p: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StreamReply {
    pub t_ms: i64,
    pub top: Vec<Ranked>,
    /// Time spent classifying this frame, in microseconds.
    pub server_us: u64,
}

#[derive(Serialize)]
struct ErrorFrame<'a> {
    t_ms: Option<i64>,
    error: ErrorDetail<'a>,
}

#[derive(Serialize)]
struct ErrorDetail<'a> {
    code: &'a str,
    reason: String,
}

pub async fn handler(ws: WebSocketUpgrade, State(s): State<Arc<AppState>>, Path(model_id): Path<String>) -> Response {
    let model = s.store.model(&model_id).ok().map(|e| e.model);
    ws.on_upgrade(move |socket| run(socket, model, model_id))
}

async fn run(mut socket: WebSocket, model: Option<Arc<GestureModel>>, model_id: String) {
    let Some(model) = model else {
        let close = CloseFrame {
            code: CLOSE_MODEL_NOT_FOUND,
            reason: format!("model_not_found: {model_id}").into(),
        };
        let _ = socket.send(Message::Close(Some(close))).await;
        return;
    };
    let mut last_t: Option<i64> = None;
    while let Some(Ok(msg)) = socket.recv().await {
        let text = match msg {
            Message::Text(t) => t,
            Message::Binary(b) => match String::from_utf8(b.to_vec()) {
                Ok(t) => t.into(),
                Err(_) => {
                    if send_error(&mut socket, None, "invalid_json", "binary message is not UTF-8".into())
                        .await
                        .is_err()
                    {
                        break;
                    }
                    continue;
                }
            },
            Message::Close(_) => break,
            _ => continue,
        };
        let reply = handle(&model, text.as_str(), &mut last_t);
        let sent = match reply {
            Ok(r) => {
                socket
                    .send(Message::Text(serde_json::to_string(&r).unwrap_or_default().into()))
                    .await
            }
            Err((t, code, reason)) => send_error(&mut socket, t, code, reason).await,
        };
        if sent.is_err() {
            break;
        }
    }
}

async fn send_error(socket: &mut WebSocket, t_ms: Option<i64>, code: &str, reason: String) -> Result<(), axum::Error> {
    let body = ErrorFrame {
        t_ms,
        error: ErrorDetail { code, reason },
    };
    socket
        .send(Message::Text(serde_json::to_string(&body).unwrap_or_default().into()))
        .await
}

type FrameError = (Option<i64>, &'static str, String);

fn handle(model: &GestureModel, text: &str, last_t: &mut Option<i64>) -> Result<StreamReply, FrameError> {
    let start = Instant::now();
    let frame: StreamFrame = serde_json::from_str(text).map_err(|e| (None, "invalid_json", e.to_string()))?;
    let t_ms = frame.t_ms();
    if let Some(prev) = *last_t {
        if t_ms < prev {
            return Err((
                Some(t_ms),
                "out_of_order",
                format!("t_ms {t_ms} is earlier than the previous frame's {prev}"),
            ));
        }
    }
    let records = match &frame {
        StreamFrame::Hands { hands, .. } => hands.as_slice(),
        StreamFrame::Single(r) => std::slice::from_ref(r),
    };
    let hands = records
        .iter()
        .map(checked_frame)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| (Some(t_ms), e.code(), e.to_string()))?;
    let ranked = model
        .predict(&hands)
        .map_err(|e| (Some(t_ms), e.code(), e.to_string()))?;
    *last_t = Some(t_ms);
    Ok(StreamReply {
        t_ms,
        top: ranked.into_iter().map(|(label, p)| Ranked { label, p }).collect(),
        server_us: start.elapsed().as_micros() as u64,
    })
}
