//! Recognizer service: project store, training jobs, HTTP API, live
//! classification stream, latency benchmark and the `gestureforge` CLI.

pub mod api;
pub mod bench;
pub mod cli;
pub mod error;
pub mod jobs;
pub mod store;
pub mod stream;
pub mod training;

use std::sync::Arc;

use gestureforge_core::embedder::EmbeddingModel;

pub use api::router;
pub use error::ApiError;

pub const DEFAULT_PORT: u16 = 8377;

/// Everything a request handler needs.
pub struct AppState {
    pub store: Arc<store::Store>,
    pub jobs: Arc<jobs::JobManager>,
    /// Pretrained embedder every training job starts from.
    pub embedder: Arc<EmbeddingModel>,
    pub token: Option<String>,
}

impl AppState {
    pub fn new(store: store::Store, embedder: EmbeddingModel, max_jobs: usize, token: Option<String>) -> Arc<Self> {
        Arc::new(AppState {
            store: Arc::new(store),
            jobs: Arc::new(jobs::JobManager::new(max_jobs)),
            embedder: Arc::new(embedder),
            token: token.filter(|t| !t.is_empty()),
        })
    }
}
