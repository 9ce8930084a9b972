pub mod embedder;
pub mod error;
pub mod fingerspell;
pub mod gesture;
pub mod landmark;
pub mod metrics;
pub mod modelfile;
pub mod nn;
pub mod synth;

pub use error::{Error, Result};
