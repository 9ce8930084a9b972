//! The single training path used by both the CLI and service jobs, so that
//! equal data, spec and seed give byte-identical model files either way.

use gestureforge_core::embedder::EmbeddingModel;
use gestureforge_core::gesture::{
    kshot_sample, label_map_for, train_with_progress, EpochProgress, GestureHeadConfig, GestureModel, LabeledFrame,
    TrainSpec,
};
use gestureforge_core::landmark::NormalizationConfig;
use gestureforge_core::synth::BACKGROUND;
use gestureforge_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadOptions {
    pub hidden_dims: Vec<usize>,
    pub dropout_rate: f64,
}

impl Default for HeadOptions {
    fn default() -> Self {
        let d = GestureHeadConfig::new(1);
        HeadOptions {
            hidden_dims: d.hidden_dims,
            dropout_rate: d.dropout_rate,
        }
    }
}

/// Draws the K-shot training split from `samples` and trains on it.
///
/// When `classes` is given every listed gesture class must have at least
/// `spec.k` samples, even if it has none at all.
pub fn train_kshot(
    embedder: &EmbeddingModel,
    samples: &[LabeledFrame],
    classes: Option<&[String]>,
    spec: &TrainSpec,
    head: &HeadOptions,
    on_epoch: &mut dyn FnMut(EpochProgress),
) -> Result<GestureModel> {
    if let Some(classes) = classes {
        for class in classes.iter().filter(|c| c.as_str() != BACKGROUND) {
            let available = samples.iter().filter(|(_, l)| l == class).count();
            if available < spec.k {
                return Err(Error::InsufficientData {
                    class: class.clone(),
                    available,
                    required: spec.k,
                });
            }
        }
    }
    let (train_split, _) = kshot_sample(samples, spec.k, spec.seed)?;
    let cfg = GestureHeadConfig {
        hidden_dims: head.hidden_dims.clone(),
        dropout_rate: head.dropout_rate,
        num_gestures: label_map_for(&train_split).len() - 1,
    };
    train_with_progress(
        embedder,
        &train_split,
        &cfg,
        spec,
        &NormalizationConfig::default(),
        on_epoch,
    )
}
