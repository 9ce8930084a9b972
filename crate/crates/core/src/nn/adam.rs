use serde::{Deserialize, Serialize};

use super::Parameterized;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the whole gradient when its global L2 norm exceeds this.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

/// Bias-corrected Adam. Moment buffers are allocated on the first step and
/// matched to parameter slots by visitation order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Result<Self> {
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            max_grad_norm,
        } = config;
        let clip_ok = max_grad_norm.is_none_or(|m| m > 0.0);
        if !(lr > 0.0 && eps > 0.0 && beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0 && clip_ok) {
            return Err(Error::InvalidArgument(format!("invalid Adam configuration {config:?}")));
        }
        Ok(AdamState {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    /// Applies one update to every parameter slot of `model`.
    pub fn step(&mut self, model: &mut dyn Parameterized) -> Result<()> {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            max_grad_norm,
        } = self.config;
        let mut clip = 1.0;
        if let Some(max) = max_grad_norm {
            let mut sq = 0.0;
            model.visit_params(&mut |_, grad| sq += grad.iter().map(|g| g * g).sum::<f64>());
            let norm = sq.sqrt();
            if norm > max {
                clip = max / norm;
            }
        }
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let first_step = self.first.is_empty();
        let (first, second) = (&mut self.first, &mut self.second);
        let mut slot = 0;
        let mut failure = None;
        model.visit_params(&mut |value, grad| {
            if failure.is_some() {
                return;
            }
            if value.len() != grad.len() {
                failure = Some(format!("slot {slot}: {} params vs {} grads", value.len(), grad.len()));
                return;
            }
            if first_step {
                first.push(vec![0.0; value.len()]);
                second.push(vec![0.0; value.len()]);
            }
            let (Some(m), Some(v)) = (first.get_mut(slot), second.get_mut(slot)) else {
                failure = Some(format!("slot {slot} was not present on the first step"));
                return;
            };
            if m.len() != value.len() {
                failure = Some(format!("slot {slot}: state {} vs params {}", m.len(), value.len()));
                return;
            }
            for i in 0..value.len() {
                let g = grad[i] * clip;
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                value[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            slot += 1;
        });
        if let Some(detail) = failure {
            return Err(Error::shape("adam_step", detail));
        }
        if slot != self.first.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{slot} slots visited, state has {}", self.first.len()),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scalar {
        x: Vec<f64>,
        g: Vec<f64>,
    }

    impl Parameterized for Scalar {
        fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &[f64])) {
            f(&mut self.x, &self.g);
        }

        fn zero_grad(&mut self) {
            self.g.fill(0.0);
        }
    }

    #[test]
    fn zero_gradients_leave_parameters_untouched() {
        let mut s = Scalar {
            x: vec![0.3, -1.7, 2.5],
            g: vec![0.0; 3],
        };
        let before = s.x.clone();
        let mut adam = AdamState::new(AdamConfig::default()).unwrap();
        for _ in 0..10 {
            adam.step(&mut s).unwrap();
        }
        assert_eq!(
            s.x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            before.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [0.5, -3.0, 1e-2] {
            let mut s = Scalar {
                x: vec![1.0],
                g: vec![g],
            };
            let mut adam = AdamState::new(AdamConfig::with_lr(0.01)).unwrap();
            adam.step(&mut s).unwrap();
            // |dx| = lr * |g| / (|g| + eps)
            let expect = 0.01 * g.abs() / (g.abs() + 1e-8);
            assert!(((1.0 - s.x[0]).abs() - expect).abs() < 1e-12);
            assert!(((1.0 - s.x[0]).abs() - 0.01).abs() < 1e-8);
        }
    }

    #[test]
    fn minimizes_quadratic_bowl() {
        let mut s = Scalar {
            x: vec![1.0],
            g: vec![0.0],
        };
        let mut adam = AdamState::new(AdamConfig::with_lr(0.05)).unwrap();
        for _ in 0..500 {
            s.g[0] = 2.0 * s.x[0];
            adam.step(&mut s).unwrap();
        }
        assert!(s.x[0].abs() < 1e-2, "{}", s.x[0]);
    }

    #[test]
    fn clipping_bounds_the_effective_gradient() {
        let config = AdamConfig {
            max_grad_norm: Some(1.0),
            ..AdamConfig::with_lr(0.1)
        };
        let mut adam = AdamState::new(config).unwrap();
        let mut s = Scalar {
            x: vec![0.0, 0.0],
            g: vec![30.0, 40.0],
        };
        adam.step(&mut s).unwrap();
        // Adam's first step is scale-free, so clipping must not change it.
        assert!((s.x[0] + 0.1).abs() < 1e-7 && (s.x[1] + 0.1).abs() < 1e-7);
        s.g = vec![0.0, 0.0];
        adam.step(&mut s).unwrap();
        let m = 0.9 * 0.1 * 0.6 / (1.0 - 0.81);
        let v = 0.999 * 0.001 * 0.36 / (1.0 - 0.999f64.powi(2));
        assert!((s.x[0] - (-0.1 - 0.1 * m / (v.sqrt() + 1e-8))).abs() < 1e-7);
        assert!(AdamState::new(AdamConfig {
            max_grad_norm: Some(0.0),
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn rejects_bad_config_and_shape_changes() {
        assert!(AdamState::new(AdamConfig {
            beta1: 1.0,
            ..Default::default()
        })
        .is_err());
        assert!(AdamState::new(AdamConfig::with_lr(0.0)).is_err());
        let mut adam = AdamState::new(AdamConfig::default()).unwrap();
        adam.step(&mut Scalar {
            x: vec![1.0],
            g: vec![1.0],
        })
        .unwrap();
        let err = adam.step(&mut Scalar {
            x: vec![1.0, 2.0],
            g: vec![1.0, 1.0],
        });
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
        let err = adam.step(&mut Scalar {
            x: vec![1.0],
            g: vec![1.0, 1.0],
        });
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
    }
}
