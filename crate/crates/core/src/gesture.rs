//! Custom gesture classifier: an embedder feeding a small dense head over
//! N gesture classes plus background (class 0), trained from K examples per class.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedder::{input_features, EmbeddingModel, INPUT_DIM};
use crate::error::{Error, Result};
use crate::landmark::{FrameLandmarks, NormalizationConfig};
use crate::nn::{
    affine_bwd, affine_fwd, cross_entropy, dropout_mask, hadamard, relu_bwd, relu_fwd, softmax, AdamConfig, AdamState,
    Affine, Parameterized, Tensor2,
};
use crate::synth::BACKGROUND;

/// A single-hand sample and its class name.
pub type LabeledFrame = (FrameLandmarks, String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GestureHeadConfig {
    pub hidden_dims: Vec<usize>,
    pub dropout_rate: f64,
    pub num_gestures: usize,
}

impl GestureHeadConfig {
    pub fn new(num_gestures: usize) -> Self {
        GestureHeadConfig {
            hidden_dims: vec![64],
            dropout_rate: 0.2,
            num_gestures,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_gestures == 0 {
            return Err(Error::InvalidArgument("at least one gesture class is required".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument("head layer widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "finetune")]
    FineTuned,
    #[serde(rename = "frozen")]
    Frozen,
    #[serde(rename = "random")]
    RandomInit,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::FineTuned, Regime::RandomInit, Regime::Frozen];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::FineTuned => "finetune",
            Regime::Frozen => "frozen",
            Regime::RandomInit => "random",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "finetune" | "finetuned" | "fine_tuned" => Ok(Regime::FineTuned),
            "frozen" => Ok(Regime::Frozen),
            "random" | "randominit" | "random_init" => Ok(Regime::RandomInit),
            other => Err(Error::InvalidArgument(format!("unknown regime {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub regime: Regime,
    pub k: usize,
    pub lr_head: f64,
    pub lr_embedder: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl TrainSpec {
    pub fn new(regime: Regime, k: usize, seed: u64) -> Self {
        TrainSpec {
            regime,
            k,
            lr_head: 1e-3,
            lr_embedder: if regime == Regime::Frozen { 0.0 } else { 1e-4 },
            batch_size: 32,
            epochs: 50,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidArgument(
                "k, batch_size and epochs must be positive".into(),
            ));
        }
        if !(self.lr_head > 0.0) || !(self.lr_embedder >= 0.0) {
            return Err(Error::InvalidArgument("learning rates must be positive".into()));
        }
        if self.regime != Regime::Frozen && self.lr_embedder == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "{} regime needs lr_embedder > 0",
                self.regime
            )));
        }
        Ok(())
    }

    fn effective_lr_embedder(&self) -> f64 {
        if self.regime == Regime::Frozen {
            0.0
        } else {
            self.lr_embedder
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub spec: TrainSpec,
    pub train_samples: usize,
    pub final_loss: f64,
    /// SHA-256 of the training samples, see [`data_digest`].
    pub data_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GestureModel {
    pub embedder: EmbeddingModel,
    /// Hidden layers (ReLU after each) then the output projection.
    pub head: Vec<Affine>,
    pub head_config: GestureHeadConfig,
    pub label_map: Vec<String>,
    pub norm_cfg: NormalizationConfig,
    pub meta: Option<TrainingMeta>,
}

/// Hex SHA-256 over every sample's coordinates, location, handedness,
/// timestamp and label, in order.
pub fn data_digest(data: &[LabeledFrame]) -> String {
    let mut h = Sha256::new();
    for (f, label) in data {
        for v in f
            .points
            .iter()
            .flatten()
            .chain([&f.location.wrist_x, &f.location.wrist_y, &f.location.hand_scale])
        {
            h.update(v.to_le_bytes());
        }
        h.update([f.handedness as u8]);
        h.update(f.timestamp_ms.to_le_bytes());
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
    }
    hex::encode(h.finalize())
}

/// `background` followed by the sorted distinct gesture names in `data`.
pub fn label_map_for(data: &[LabeledFrame]) -> Vec<String> {
    let mut names: Vec<String> = data
        .iter()
        .map(|(_, l)| l.clone())
        .filter(|l| l != BACKGROUND)
        .collect();
    names.sort();
    names.dedup();
    std::iter::once(BACKGROUND.to_string()).chain(names).collect()
}

/// Splits `data` into a K-shot training set and the remaining evaluation set.
///
/// The training set holds exactly `k` samples of every gesture class and up
/// to `k` background samples; selection is a seeded shuffle per class and
/// both splits keep the input order.
pub fn kshot_sample(data: &[LabeledFrame], k: usize, seed: u64) -> Result<(Vec<LabeledFrame>, Vec<LabeledFrame>)> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, (_, label)) in data.iter().enumerate() {
        by_class.entry(label.as_str()).or_default().push(i);
    }
    let mut chosen = vec![false; data.len()];
    for (ci, (class, idx)) in by_class.iter_mut().enumerate() {
        let take = if *class == BACKGROUND {
            k.min(idx.len())
        } else if idx.len() < k {
            return Err(Error::InsufficientData {
                class: class.to_string(),
                available: idx.len(),
                required: k,
            });
        } else {
            k
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(ci as u64 + 1);
        idx.shuffle(&mut rng);
        for &i in &idx[..take] {
            chosen[i] = true;
        }
    }
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for (sample, picked) in data.iter().zip(chosen) {
        if picked {
            train.push(sample.clone());
        } else {
            eval.push(sample.clone());
        }
    }
    Ok((train, eval))
}

struct HeadCache {
    inputs: Vec<Tensor2>,
    pre_relu: Vec<Tensor2>,
    masks: Vec<Option<Tensor2>>,
    last: Tensor2,
}

fn head_forward(head: &[Affine], x: &Tensor2, dropout: Option<(f64, &mut ChaCha8Rng)>) -> Result<(Tensor2, HeadCache)> {
    let (hidden, output) = head.split_at(head.len() - 1);
    let mut rng = dropout;
    let mut cache = HeadCache {
        inputs: Vec::new(),
        pre_relu: Vec::new(),
        masks: Vec::new(),
        last: Tensor2::zeros(0, 0),
    };
    let mut h = x.clone();
    for layer in hidden {
        let z = affine_fwd(&h, layer)?;
        let mut a = relu_fwd(&z);
        let mask = match rng.as_mut() {
            Some((rate, r)) if *rate > 0.0 => Some(dropout_mask(a.rows(), a.cols(), *rate, *r)),
            _ => None,
        };
        if let Some(m) = &mask {
            a = hadamard(&a, m)?;
        }
        cache.inputs.push(h);
        cache.pre_relu.push(z);
        cache.masks.push(mask);
        h = a;
    }
    let logits = affine_fwd(&h, &output[0])?;
    cache.last = h;
    Ok((logits, cache))
}

fn head_backward(head: &mut [Affine], dlogits: &Tensor2, cache: &HeadCache) -> Result<Tensor2> {
    let n = head.len();
    let mut d = affine_bwd(&cache.last, dlogits, &mut head[n - 1])?;
    for i in (0..n - 1).rev() {
        if let Some(m) = &cache.masks[i] {
            d = hadamard(&d, m)?;
        }
        d = relu_bwd(&cache.pre_relu[i], &d)?;
        d = affine_bwd(&cache.inputs[i], &d, &mut head[i])?;
    }
    Ok(d)
}

struct Head<'a>(&'a mut [Affine]);

impl Parameterized for Head<'_> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &[f64])) {
        self.0.visit_params(f);
    }

    fn zero_grad(&mut self) {
        self.0.zero_grad();
    }
}

/// Per-epoch progress passed to training observers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochProgress {
    pub epoch: usize,
    pub epochs: usize,
    pub mean_loss: f64,
}

pub fn train(
    pretrained: &EmbeddingModel,
    data: &[LabeledFrame],
    cfg: &GestureHeadConfig,
    spec: &TrainSpec,
) -> Result<GestureModel> {
    train_with_progress(
        pretrained,
        data,
        cfg,
        spec,
        &NormalizationConfig::default(),
        &mut |_| {},
    )
}

/// Trains a gesture model. RandomInit replaces the embedder with fresh
/// weights drawn from `spec.seed`; Frozen never modifies it; FineTuned
/// updates embedder and head with their own learning rates.
pub fn train_with_progress(
    pretrained: &EmbeddingModel,
    data: &[LabeledFrame],
    cfg: &GestureHeadConfig,
    spec: &TrainSpec,
    norm_cfg: &NormalizationConfig,
    on_epoch: &mut dyn FnMut(EpochProgress),
) -> Result<GestureModel> {
    cfg.validate()?;
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let label_map = label_map_for(data);
    if label_map.len() != cfg.num_gestures + 1 {
        return Err(Error::LabelMismatch(format!(
            "head expects {} gestures, data has {}",
            cfg.num_gestures,
            label_map.len() - 1
        )));
    }
    let targets: Vec<usize> = data
        .iter()
        .map(|(_, l)| label_map.iter().position(|m| m == l).unwrap_or(0))
        .collect();
    let rows: Vec<f64> = data
        .iter()
        .map(|(f, _)| input_features(f, norm_cfg))
        .collect::<Result<Vec<_>>>()?
        .concat();
    let x_all = Tensor2::new(data.len(), INPUT_DIM, rows)?;

    let mut embedder = match spec.regime {
        Regime::RandomInit => pretrained.randomize(spec.seed),
        _ => pretrained.clone_weights(),
    };
    let train_embedder = spec.regime != Regime::Frozen;
    if train_embedder && data.len() < 2 {
        return Err(Error::InvalidArgument(
            "training the embedder needs at least two samples".into(),
        ));
    }
    let frozen_embeddings = if train_embedder {
        None
    } else {
        Some(embedder.infer(&x_all)?)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut head = init_head(embedder.config.embedding_dim, cfg, &mut rng);
    let mut adam_head = AdamState::new(AdamConfig::with_lr(spec.lr_head))?;
    let mut adam_embedder = if train_embedder {
        Some(AdamState::new(AdamConfig::with_lr(spec.effective_lr_embedder()))?)
    } else {
        None
    };

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut final_loss = f64::NAN;
    for epoch in 0..spec.epochs {
        order.shuffle(&mut rng);
        let mut batches: Vec<Vec<usize>> = order.chunks(spec.batch_size).map(<[usize]>::to_vec).collect();
        // Batch normalization needs two rows; a trailing single sample joins the previous batch.
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
            let last = batches.pop().unwrap_or_default();
            if let Some(prev) = batches.last_mut() {
                prev.extend(last);
            }
        }
        let mut loss_sum = 0.0;
        for batch in &batches {
            let y: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
            head.zero_grad();
            if let Some(emb) = &frozen_embeddings {
                let (logits, cache) = head_forward(&head, &emb.gather_rows(batch), Some((cfg.dropout_rate, &mut rng)))?;
                let (loss, dlogits) = cross_entropy(&logits, &y)?;
                head_backward(&mut head, &dlogits, &cache)?;
                loss_sum += loss * batch.len() as f64;
            } else {
                embedder.zero_grad();
                let (emb, ecache) = embedder.forward(&x_all.gather_rows(batch), true)?;
                let (logits, cache) = head_forward(&head, &emb, Some((cfg.dropout_rate, &mut rng)))?;
                let (loss, dlogits) = cross_entropy(&logits, &y)?;
                let demb = head_backward(&mut head, &dlogits, &cache)?;
                embedder.backward(&demb, &ecache)?;
                if let Some(adam) = adam_embedder.as_mut() {
                    adam.step(&mut embedder)?;
                }
                loss_sum += loss * batch.len() as f64;
            }
            adam_head.step(&mut Head(&mut head))?;
        }
        final_loss = loss_sum / data.len() as f64;
        on_epoch(EpochProgress {
            epoch: epoch + 1,
            epochs: spec.epochs,
            mean_loss: final_loss,
        });
    }
    head.zero_grad();
    embedder.zero_grad();
    Ok(GestureModel {
        embedder,
        head,
        head_config: cfg.clone(),
        label_map,
        norm_cfg: *norm_cfg,
        meta: Some(TrainingMeta {
            spec: spec.clone(),
            train_samples: data.len(),
            final_loss,
            data_digest: data_digest(data),
        }),
    })
}

fn init_head(input: usize, cfg: &GestureHeadConfig, rng: &mut ChaCha8Rng) -> Vec<Affine> {
    let mut layers = Vec::with_capacity(cfg.hidden_dims.len() + 1);
    let mut fan_in = input;
    for &w in &cfg.hidden_dims {
        layers.push(Affine::glorot(fan_in, w, rng));
        fan_in = w;
    }
    layers.push(Affine::glorot(fan_in, cfg.num_gestures + 1, rng));
    layers
}

impl GestureModel {
    /// Untrained model with a freshly initialized head.
    pub fn new(embedder: EmbeddingModel, label_map: Vec<String>, cfg: GestureHeadConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if label_map.first().map(String::as_str) != Some(BACKGROUND) || label_map.len() != cfg.num_gestures + 1 {
            return Err(Error::LabelMismatch(
                "label map must be background followed by one name per gesture".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = init_head(embedder.config.embedding_dim, &cfg, &mut rng);
        Ok(GestureModel {
            embedder,
            head,
            head_config: cfg,
            label_map,
            norm_cfg: NormalizationConfig::default(),
            meta: None,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.label_map.len()
    }

    fn head_infer(&self, emb: &Tensor2) -> Result<Tensor2> {
        Ok(softmax(&head_forward(&self.head, emb, None)?.0))
    }

    /// Class probabilities for one frame of one or two hands.
    pub fn probabilities(&self, hands: &[FrameLandmarks]) -> Result<Vec<f64>> {
        let emb = self.embedder.embed_frame(hands, &self.norm_cfg)?;
        let emb = Tensor2::new(1, emb.len(), emb)?;
        Ok(self.head_infer(&emb)?.into_data())
    }

    /// Probabilities for many single-hand frames (rows follow input order).
    pub fn probabilities_batch(&self, frames: &[FrameLandmarks]) -> Result<Tensor2> {
        let rows = frames
            .iter()
            .map(|f| input_features(f, &self.norm_cfg))
            .collect::<Result<Vec<_>>>()?
            .concat();
        let x = Tensor2::new(frames.len(), INPUT_DIM, rows)?;
        self.head_infer(&self.embedder.infer(&x)?)
    }

    /// Labels with probabilities, most likely first (ties keep class order).
    pub fn predict(&self, hands: &[FrameLandmarks]) -> Result<Vec<(String, f64)>> {
        let p = self.probabilities(hands)?;
        Ok(rank(&self.label_map, &p))
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.label_map.iter().position(|l| l == label)
    }
}

pub fn predict(model: &GestureModel, hands: &[FrameLandmarks]) -> Result<Vec<(String, f64)>> {
    model.predict(hands)
}

pub(crate) fn rank(labels: &[String], p: &[f64]) -> Vec<(String, f64)> {
    let mut ranked: Vec<(String, f64)> = labels.iter().cloned().zip(p.iter().copied()).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    ranked
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
