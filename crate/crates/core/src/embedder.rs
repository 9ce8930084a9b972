//! Single-hand embedding network: normalized landmarks plus a handedness
//! flag in, a 128-d embedding out. Two hands are fused by summation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landmark::{normalize_landmarks, FrameLandmarks, NormalizationConfig, NORMALIZED_LEN};
use crate::nn::{
    affine_bwd, affine_bwd_params, affine_fwd, batchnorm_bwd, batchnorm_fwd, relu_bwd, relu_fwd, Affine, BatchNorm,
    BatchNormCache, Parameterized, Tensor2,
};

pub const INPUT_DIM: usize = NORMALIZED_LEN + 1;
pub const EMBEDDING_DIM: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    pub use_batchnorm: bool,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            input_dim: INPUT_DIM,
            hidden_dims: vec![256, 256],
            embedding_dim: EMBEDDING_DIM,
            use_batchnorm: true,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim != INPUT_DIM {
            return Err(Error::InvalidArgument(format!(
                "input_dim must be {INPUT_DIM}, got {}",
                self.input_dim
            )));
        }
        if self.embedding_dim != EMBEDDING_DIM {
            return Err(Error::InvalidArgument(format!(
                "embedding_dim must be {EMBEDDING_DIM}, got {}",
                self.embedding_dim
            )));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument("hidden layer widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenBlock {
    pub affine: Affine,
    pub bn: Option<BatchNorm>,
}

/// Affine → [BatchNorm] → ReLU per hidden width, then a linear projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingModel {
    pub config: EmbeddingConfig,
    pub blocks: Vec<HiddenBlock>,
    pub output: Affine,
    pub version: u32,
}

/// Saved forward state of a batched training pass.
pub struct EmbedCache {
    inputs: Vec<Tensor2>,
    bn: Vec<Option<BatchNormCache>>,
    pre_relu: Vec<Tensor2>,
    last_hidden: Tensor2,
}

/// Embedder input row: the 63 normalized coordinates followed by -1 (left) or +1 (right).
pub fn input_features(frame: &FrameLandmarks, cfg: &NormalizationConfig) -> Result<[f64; INPUT_DIM]> {
    let norm = normalize_landmarks(frame, cfg)?;
    let mut out = [0.0; INPUT_DIM];
    out[..NORMALIZED_LEN].copy_from_slice(&norm);
    out[NORMALIZED_LEN] = frame.handedness.sign();
    Ok(out)
}

impl EmbeddingModel {
    pub fn new(config: EmbeddingConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(config.hidden_dims.len());
        let mut fan_in = config.input_dim;
        for &width in &config.hidden_dims {
            blocks.push(HiddenBlock {
                affine: Affine::glorot(fan_in, width, &mut rng),
                bn: config.use_batchnorm.then(|| BatchNorm::new(width)),
            });
            fan_in = width;
        }
        let output = Affine::glorot(fan_in, config.embedding_dim, &mut rng);
        Ok(EmbeddingModel {
            config,
            blocks,
            output,
            version: 1,
        })
    }

    /// Fresh weights for the same architecture.
    pub fn randomize(&self, seed: u64) -> EmbeddingModel {
        let mut m = EmbeddingModel::new(self.config.clone(), seed).expect("config was validated on construction");
        m.version = self.version;
        m
    }

    /// Deep copy; the result shares nothing with `self`.
    pub fn clone_weights(&self) -> EmbeddingModel {
        let mut m = self.clone();
        m.zero_grad();
        m
    }

    /// Inference pass over a batch of feature rows (B x 64), using running statistics.
    pub fn infer(&self, x: &Tensor2) -> Result<Tensor2> {
        let mut h = x.clone();
        for block in &self.blocks {
            let mut z = affine_fwd(&h, &block.affine)?;
            if let Some(bn) = &block.bn {
                z = bn_infer(&z, bn)?;
            }
            h = relu_fwd(&z);
        }
        affine_fwd(&h, &self.output)
    }

    /// Batched forward pass that records what [`EmbeddingModel::backward`] needs.
    /// In training mode batch statistics are used and running statistics updated.
    pub fn forward(&mut self, x: &Tensor2, training: bool) -> Result<(Tensor2, EmbedCache)> {
        let mut inputs = Vec::with_capacity(self.blocks.len());
        let mut bn_caches = Vec::with_capacity(self.blocks.len());
        let mut pre_relu = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for block in &mut self.blocks {
            let mut z = affine_fwd(&h, &block.affine)?;
            let cache = match &mut block.bn {
                Some(bn) => {
                    let (y, c) = batchnorm_fwd(&z, bn, training)?;
                    z = y;
                    Some(c)
                }
                None => None,
            };
            let next = relu_fwd(&z);
            inputs.push(std::mem::replace(&mut h, next));
            bn_caches.push(cache);
            pre_relu.push(z);
        }
        let y = affine_fwd(&h, &self.output)?;
        Ok((
            y,
            EmbedCache {
                inputs,
                bn: bn_caches,
                pre_relu,
                last_hidden: h,
            },
        ))
    }

    /// Accumulates parameter gradients for `dy` (B x 128).
    pub fn backward(&mut self, dy: &Tensor2, cache: &EmbedCache) -> Result<()> {
        let mut d = affine_bwd(&cache.last_hidden, dy, &mut self.output)?;
        for (i, block) in self.blocks.iter_mut().enumerate().rev() {
            d = relu_bwd(&cache.pre_relu[i], &d)?;
            if let (Some(bn), Some(c)) = (&mut block.bn, &cache.bn[i]) {
                d = batchnorm_bwd(&d, c, bn)?;
            }
            if i == 0 {
                // The network input needs no gradient.
                affine_bwd_params(&cache.inputs[i], &d, &mut block.affine)?;
            } else {
                d = affine_bwd(&cache.inputs[i], &d, &mut block.affine)?;
            }
        }
        Ok(())
    }

    /// Embedding of one hand (inference mode).
    pub fn embed_single(&self, frame: &FrameLandmarks, cfg: &NormalizationConfig) -> Result<Vec<f64>> {
        let x = Tensor2::new(1, INPUT_DIM, input_features(frame, cfg)?.to_vec())?;
        Ok(self.infer(&x)?.into_data())
    }

    /// One hand: its embedding. Two hands: the elementwise sum, so the
    /// result does not depend on hand order.
    pub fn embed_frame(&self, hands: &[FrameLandmarks], cfg: &NormalizationConfig) -> Result<Vec<f64>> {
        match hands {
            [] => Err(Error::NoHands),
            [one] => self.embed_single(one, cfg),
            [a, b] => {
                let ea = self.embed_single(a, cfg)?;
                let eb = self.embed_single(b, cfg)?;
                Ok(ea.iter().zip(&eb).map(|(x, y)| x + y).collect())
            }
            more => Err(Error::InvalidArgument(format!(
                "at most two hands per frame, got {}",
                more.len()
            ))),
        }
    }

    /// Every stored tensor in a fixed order (weights, then batchnorm running statistics).
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.push(b.affine.w.data());
            out.push(b.affine.b.data());
            if let Some(bn) = &b.bn {
                out.push(bn.gamma.data());
                out.push(bn.beta.data());
                out.push(&bn.running_mean[..]);
                out.push(&bn.running_var[..]);
            }
        }
        out.push(self.output.w.data());
        out.push(self.output.b.data());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(b.affine.w.data_mut());
            out.push(b.affine.b.data_mut());
            if let Some(bn) = &mut b.bn {
                out.push(bn.gamma.data_mut());
                out.push(bn.beta.data_mut());
                out.push(&mut bn.running_mean[..]);
                out.push(&mut bn.running_var[..]);
            }
        }
        out.push(self.output.w.data_mut());
        out.push(self.output.b.data_mut());
        out
    }
}

fn bn_infer(z: &Tensor2, bn: &BatchNorm) -> Result<Tensor2> {
    if z.cols() != bn.width() {
        return Err(Error::shape(
            "batchnorm_infer",
            format!("{} vs {}", z.cols(), bn.width()),
        ));
    }
    let mut out = z.clone();
    let (g, b) = (bn.gamma.data(), bn.beta.data());
    for r in 0..out.rows() {
        for (c, v) in out.row_mut(r).iter_mut().enumerate() {
            *v = (*v - bn.running_mean[c]) / (bn.running_var[c] + bn.eps).sqrt() * g[c] + b[c];
        }
    }
    Ok(out)
}

impl Parameterized for EmbeddingModel {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &[f64])) {
        for b in &mut self.blocks {
            b.affine.visit_params(f);
            if let Some(bn) = &mut b.bn {
                bn.visit_params(f);
            }
        }
        self.output.visit_params(f);
    }

    fn zero_grad(&mut self) {
        for b in &mut self.blocks {
            b.affine.zero_grad();
            if let Some(bn) = &mut b.bn {
                bn.zero_grad();
            }
        }
        self.output.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landmark::{Handedness, NUM_LANDMARKS};
    use crate::nn::grad_check;
    use rand::Rng;

    fn random_frame(rng: &mut impl Rng, hand: Handedness) -> FrameLandmarks {
        let mut points = [[0.0; 3]; NUM_LANDMARKS];
        for p in points.iter_mut() {
            *p = [
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
                rng.random_range(-0.1..0.1),
            ];
        }
        FrameLandmarks::from_points(points, hand, 0)
    }

    /// Model whose batchnorm running statistics differ from the identity.
    fn perturbed_model(seed: u64) -> EmbeddingModel {
        let mut m = EmbeddingModel::new(EmbeddingConfig::default(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for b in &mut m.blocks {
            let bn = b.bn.as_mut().unwrap();
            bn.running_mean
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.5..0.5));
            bn.running_var.iter_mut().for_each(|v| *v = rng.random_range(0.5..2.0));
            bn.gamma
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(0.5..1.5));
            bn.beta
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.2..0.2));
            b.affine
                .b
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
        m
    }

    #[test]
    fn embedding_matches_hand_composed_forward() {
        let m = perturbed_model(1);
        let cfg = NormalizationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frame = random_frame(&mut rng, Handedness::Left);

        // Independent scalar-loop composition of the same layers.
        let norm = normalize_landmarks(&frame, &cfg).unwrap();
        let mut h: Vec<f64> = norm.to_vec();
        h.push(-1.0);
        for b in &m.blocks {
            let (w, bias, bn) = (&b.affine.w, b.affine.b.data(), b.bn.as_ref().unwrap());
            let mut next = vec![0.0; w.cols()];
            for j in 0..w.cols() {
                let mut z = bias[j];
                for i in 0..w.rows() {
                    z += h[i] * w.get(i, j);
                }
                z = (z - bn.running_mean[j]) / (bn.running_var[j] + bn.eps).sqrt();
                z = z * bn.gamma.data()[j] + bn.beta.data()[j];
                next[j] = z.max(0.0);
            }
            h = next;
        }
        let mut expect = vec![0.0; EMBEDDING_DIM];
        for (j, e) in expect.iter_mut().enumerate() {
            *e = m.output.b.data()[j] + (0..h.len()).map(|i| h[i] * m.output.w.get(i, j)).sum::<f64>();
        }

        let got = m.embed_single(&frame, &cfg).unwrap();
        assert_eq!(got.len(), EMBEDDING_DIM);
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        assert_eq!(got, m.embed_single(&frame, &cfg).unwrap());
    }

    #[test]
    fn embedding_ignores_translation_and_scale() {
        let m = perturbed_model(3);
        let cfg = NormalizationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frame = random_frame(&mut rng, Handedness::Right);
        let mut moved = frame.clone();
        for p in moved.points.iter_mut() {
            *p = [p[0] * 1.7 + 0.3, p[1] * 1.7 - 0.2, p[2] * 1.7 + 0.05];
        }
        let a = m.embed_single(&frame, &cfg).unwrap();
        let b = m.embed_single(&moved, &cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn frame_embedding_is_order_free_sum() {
        let m = perturbed_model(5);
        let cfg = NormalizationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let l = random_frame(&mut rng, Handedness::Left);
        let r = random_frame(&mut rng, Handedness::Right);
        let lr = m.embed_frame(&[l.clone(), r.clone()], &cfg).unwrap();
        let rl = m.embed_frame(&[r.clone(), l.clone()], &cfg).unwrap();
        assert_eq!(lr, rl);
        let el = m.embed_single(&l, &cfg).unwrap();
        let er = m.embed_single(&r, &cfg).unwrap();
        let sum: Vec<f64> = el.iter().zip(&er).map(|(a, b)| a + b).collect();
        assert_eq!(lr, sum);
        assert_eq!(m.embed_frame(std::slice::from_ref(&l), &cfg).unwrap(), el);
        assert!(matches!(m.embed_frame(&[], &cfg), Err(Error::NoHands)));
    }

    #[test]
    fn clone_and_randomize_semantics() {
        let m = EmbeddingModel::new(EmbeddingConfig::default(), 7).unwrap();
        let mut c = m.clone_weights();
        assert_eq!(c, m);
        c.output.w.data_mut()[0] += 1.0;
        assert_ne!(c, m);
        assert_eq!(m.randomize(9), m.randomize(9));
        assert_ne!(m.randomize(9).output.w, m.randomize(10).output.w);
    }

    #[test]
    fn output_width_is_fixed() {
        let mut cfg = EmbeddingConfig::default();
        cfg.hidden_dims = vec![32];
        let m = EmbeddingModel::new(cfg.clone(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = m
            .embed_single(
                &random_frame(&mut rng, Handedness::Left),
                &NormalizationConfig::default(),
            )
            .unwrap();
        assert_eq!(e.len(), EMBEDDING_DIM);
        cfg.embedding_dim = 64;
        assert!(EmbeddingModel::new(cfg, 1).is_err());
    }

    #[test]
    fn training_backward_matches_central_differences() {
        let cfg = EmbeddingConfig {
            hidden_dims: vec![6, 5],
            ..Default::default()
        };
        let mut m = EmbeddingModel::new(cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor2::from_fn(5, INPUT_DIM, |_, _| rng.random_range(-1.0..1.0));
        let r = Tensor2::from_fn(5, EMBEDDING_DIM, |_, _| rng.random_range(-1.0..1.0));
        let loss = |y: &Tensor2| y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>();
        let (_, cache) = m.clone().forward(&x, true).unwrap();
        m.backward(&r, &cache).unwrap();
        let w0 = m.blocks[0].affine.w.clone();
        let analytic = m.blocks[0].affine.dw.clone().unwrap();
        let err = grad_check(
            |w| {
                let mut q = m.clone();
                q.blocks[0].affine.w = Tensor2::new(w0.rows(), w0.cols(), w.to_vec()).unwrap();
                loss(&q.forward(&x, true).unwrap().0)
            },
            w0.data(),
            analytic.data(),
        );
        assert!(err < 1e-5, "{err}");
    }
}
