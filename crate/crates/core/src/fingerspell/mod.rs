//! Fingerspelling pretraining: per-frame embeddings plus hand location feed a
//! bidirectional LSTM whose per-step character logits are trained with CTC.

mod ctc;

pub use ctc::{character_error_rate, ctc_loss, edit_distance, greedy_decode, min_frames, CtcLoss, BLANK};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedder::{input_features, EmbeddingConfig, EmbeddingModel, EMBEDDING_DIM, INPUT_DIM};
use crate::error::{Error, Result};
use crate::landmark::{LandmarkSequence, NormalizationConfig};
use crate::nn::{
    affine_bwd, affine_fwd, bilstm_bwd, bilstm_fwd, log_softmax, AdamConfig, AdamState, Affine, Lstm, Parameterized,
    Tensor2,
};
use crate::synth::TOY_ALPHABET;

/// Embedding followed by `(wrist_x, wrist_y, hand_scale)`.
pub const FEATURE_DIM: usize = EMBEDDING_DIM + 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerspellModel {
    pub embedder: EmbeddingModel,
    pub lstm_forward: Lstm,
    pub lstm_backward: Lstm,
    pub char_proj: Affine,
    pub alphabet: Vec<char>,
}

/// Character ids of a word: position in the alphabet plus one (0 is blank).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CtcTarget {
    pub char_ids: Vec<usize>,
}

impl CtcTarget {
    pub fn encode(word: &str, alphabet: &[char]) -> Result<Self> {
        let char_ids = word
            .chars()
            .map(|c| {
                alphabet
                    .iter()
                    .position(|&a| a == c)
                    .map(|i| i + 1)
                    .ok_or(Error::UnknownCharacter(c))
            })
            .collect::<Result<_>>()?;
        Ok(CtcTarget { char_ids })
    }

    pub fn decode(&self, alphabet: &[char]) -> String {
        self.char_ids
            .iter()
            .filter_map(|&i| i.checked_sub(1).and_then(|i| alphabet.get(i)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub hidden: usize,
    pub seed: u64,
    pub max_grad_norm: Option<f64>,
    pub embedding: EmbeddingConfig,
    pub normalization: NormalizationConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            lr: 1e-3,
            batch_size: 4,
            epochs: 15,
            hidden: 64,
            seed: 0,
            max_grad_norm: Some(5.0),
            embedding: EmbeddingConfig::default(),
            normalization: NormalizationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Mean greedy-decode character error rate over the epoch's training batches.
    pub label_error_rate: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: FingerspellModel,
    pub history: Vec<EpochStats>,
    /// Sequences dropped because their word cannot be emitted in their frame count.
    pub skipped_infeasible: usize,
}

impl FingerspellModel {
    pub fn new(embedding: EmbeddingConfig, hidden: usize, alphabet: Vec<char>, seed: u64) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::InvalidArgument("LSTM hidden size must be positive".into()));
        }
        if alphabet.is_empty() {
            return Err(Error::InvalidArgument("empty alphabet".into()));
        }
        let embedder = EmbeddingModel::new(embedding, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_F1A6_E125_7E11);
        let lstm_forward = Lstm::init(FEATURE_DIM, hidden, &mut rng);
        let lstm_backward = Lstm::init(FEATURE_DIM, hidden, &mut rng);
        let char_proj = Affine::glorot(2 * hidden, alphabet.len() + 1, &mut rng);
        Ok(FingerspellModel {
            embedder,
            lstm_forward,
            lstm_backward,
            char_proj,
            alphabet,
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.lstm_forward.hidden_size()
    }

    pub fn num_classes(&self) -> usize {
        self.alphabet.len() + 1
    }

    /// Per-step log-probabilities (T x (A+1)) in inference mode.
    pub fn log_probs(&self, seq: &LandmarkSequence, cfg: &NormalizationConfig) -> Result<Tensor2> {
        let features = frame_features(self, seq, cfg)?;
        let (h, _) = bilstm_fwd(&features, &self.lstm_forward, &self.lstm_backward)?;
        Ok(log_softmax(&affine_fwd(&h, &self.char_proj)?))
    }

    pub fn transcribe(&self, seq: &LandmarkSequence, cfg: &NormalizationConfig) -> Result<String> {
        let ids = greedy_decode(&self.log_probs(seq, cfg)?);
        Ok(CtcTarget { char_ids: ids }.decode(&self.alphabet))
    }

    /// Mean character error rate of greedy decoding over labeled sequences.
    pub fn character_error_rate(&self, seqs: &[LandmarkSequence], cfg: &NormalizationConfig) -> Result<f64> {
        if seqs.is_empty() {
            return Err(Error::InvalidArgument("no sequences to score".into()));
        }
        let mut total = 0.0;
        for seq in seqs {
            let word = seq
                .label
                .as_deref()
                .ok_or_else(|| Error::InvalidArgument("unlabeled sequence".into()))?;
            let target = CtcTarget::encode(word, &self.alphabet)?;
            let hyp = greedy_decode(&self.log_probs(seq, cfg)?);
            total += character_error_rate(&hyp, &target.char_ids);
        }
        Ok(total / seqs.len() as f64)
    }
}

impl Parameterized for FingerspellModel {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &[f64])) {
        self.embedder.visit_params(f);
        self.lstm_forward.visit_params(f);
        self.lstm_backward.visit_params(f);
        self.char_proj.visit_params(f);
    }

    fn zero_grad(&mut self) {
        self.embedder.zero_grad();
        self.lstm_forward.zero_grad();
        self.lstm_backward.zero_grad();
        self.char_proj.zero_grad();
    }
}

fn sequence_inputs(seq: &LandmarkSequence, cfg: &NormalizationConfig) -> Result<(Tensor2, Tensor2)> {
    if seq.is_empty() {
        return Err(Error::InvalidArgument("empty sequence".into()));
    }
    let mut x = Vec::with_capacity(seq.len() * INPUT_DIM);
    let mut loc = Vec::with_capacity(seq.len() * 3);
    for frame in &seq.frames {
        x.extend_from_slice(&input_features(frame, cfg)?);
        let l = frame.location;
        loc.extend_from_slice(&[l.wrist_x, l.wrist_y, l.hand_scale]);
    }
    Ok((Tensor2::new(seq.len(), INPUT_DIM, x)?, Tensor2::new(seq.len(), 3, loc)?))
}

/// Per-frame LSTM inputs (T x 131): embedding then raw hand location.
pub fn frame_features(model: &FingerspellModel, seq: &LandmarkSequence, cfg: &NormalizationConfig) -> Result<Tensor2> {
    let (x, loc) = sequence_inputs(seq, cfg)?;
    model.embedder.infer(&x)?.hcat(&loc)
}

/// Deep copy of the pretrained embedder for transfer.
pub fn export_embedder(model: &FingerspellModel) -> EmbeddingModel {
    model.embedder.clone_weights()
}

struct Prepared {
    x: Tensor2,
    loc: Tensor2,
    target: Vec<usize>,
}

/// Trains a fingerspelling model with Adam on per-sequence CTC loss,
/// averaged over the sequences of each minibatch.
pub fn pretrain(dataset: &[LandmarkSequence], hyper: &PretrainConfig) -> Result<PretrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty pretraining dataset".into()));
    }
    if hyper.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let alphabet = TOY_ALPHABET.to_vec();
    let mut model = FingerspellModel::new(hyper.embedding.clone(), hyper.hidden, alphabet.clone(), hyper.seed)?;

    let mut data = Vec::with_capacity(dataset.len());
    let mut skipped_infeasible = 0;
    for seq in dataset {
        seq.validate()?;
        let word = seq
            .label
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("pretraining sequence has no word label".into()))?;
        let target = CtcTarget::encode(word, &alphabet)?.char_ids;
        if min_frames(&target) > seq.len() {
            skipped_infeasible += 1;
            continue;
        }
        let (x, loc) = sequence_inputs(seq, &hyper.normalization)?;
        data.push(Prepared { x, loc, target });
    }
    if skipped_infeasible > 0 {
        tracing::warn!(
            skipped_infeasible,
            "skipping pretraining sequences with infeasible CTC targets"
        );
    }
    if data.is_empty() && hyper.epochs > 0 {
        return Err(Error::InvalidArgument("every pretraining target is infeasible".into()));
    }

    let mut adam = AdamState::new(AdamConfig {
        max_grad_norm: hyper.max_grad_norm,
        ..AdamConfig::with_lr(hyper.lr)
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut history = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let batches = bucketed_batches(&data, hyper.batch_size, &mut rng);
        let (mut loss_sum, mut cer_sum, mut count) = (0.0, 0.0, 0usize);
        for batch in &batches {
            let (loss, cer) = train_step(&mut model, &data, batch, &mut adam)?;
            loss_sum += loss;
            cer_sum += cer;
            count += batch.len();
        }
        let mean_loss = loss_sum / count as f64;
        if !mean_loss.is_finite() {
            return Err(Error::InvalidArgument(format!("pretraining diverged at epoch {epoch}")));
        }
        history.push(EpochStats {
            epoch,
            mean_loss,
            label_error_rate: cer_sum / count as f64,
        });
    }
    model.zero_grad();
    Ok(PretrainOutcome {
        model,
        history,
        skipped_infeasible,
    })
}

/// Shuffle, sort by length within windows of four batches, split, then
/// shuffle batch order.
fn bucketed_batches(data: &[Prepared], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    for window in order.chunks_mut(batch_size * 4) {
        window.sort_by_key(|&i| data[i].x.rows());
    }
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    // Batch normalization needs two rows; a lone one-frame sequence joins its neighbour.
    if batches.len() > 1
        && batches
            .last()
            .is_some_and(|b| b.iter().map(|&i| data[i].x.rows()).sum::<usize>() < 2)
    {
        let last = batches.pop().unwrap_or_default();
        if let Some(prev) = batches.last_mut() {
            prev.extend(last);
        }
    }
    batches.shuffle(rng);
    batches
}

/// One optimizer step on a batch; returns (summed loss, summed CER).
fn train_step(
    model: &mut FingerspellModel,
    data: &[Prepared],
    batch: &[usize],
    adam: &mut AdamState,
) -> Result<(f64, f64)> {
    let total_rows: usize = batch.iter().map(|&i| data[i].x.rows()).sum();
    let mut stacked = Vec::with_capacity(total_rows * INPUT_DIM);
    for &i in batch {
        stacked.extend_from_slice(data[i].x.data());
    }
    let x = Tensor2::new(total_rows, INPUT_DIM, stacked)?;

    model.zero_grad();
    let (emb, cache) = model.embedder.forward(&x, true)?;
    let mut d_emb = Tensor2::zeros(total_rows, EMBEDDING_DIM);
    let scale = 1.0 / batch.len() as f64;
    let (mut loss_sum, mut cer_sum) = (0.0, 0.0);
    let mut offset = 0;
    for &i in batch {
        let item = &data[i];
        let t = item.x.rows();
        let rows: Vec<usize> = (offset..offset + t).collect();
        let features = emb.gather_rows(&rows).hcat(&item.loc)?;
        let (h, bi_cache) = bilstm_fwd(&features, &model.lstm_forward, &model.lstm_backward)?;
        let logits = affine_fwd(&h, &model.char_proj)?;
        let lp = log_softmax(&logits);
        let ctc = ctc_loss(&lp, &item.target)?;
        loss_sum += ctc.loss;
        cer_sum += character_error_rate(&greedy_decode(&lp), &item.target);

        let mut dlogits = ctc.grad;
        dlogits.scale(scale);
        let dh = affine_bwd(&h, &dlogits, &mut model.char_proj)?;
        let dfeat = bilstm_bwd(&dh, &bi_cache, &mut model.lstm_forward, &mut model.lstm_backward)?;
        for r in 0..t {
            d_emb
                .row_mut(offset + r)
                .copy_from_slice(&dfeat.row(r)[..EMBEDDING_DIM]);
        }
        offset += t;
    }
    model.embedder.backward(&d_emb, &cache)?;
    adam.step(model)?;
    Ok((loss_sum, cer_sum))
}
