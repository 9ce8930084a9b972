//! Dense double-precision network primitives with hand-written gradients.

mod adam;
mod layers;
mod lstm;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use layers::{
    affine_bwd, affine_bwd_params, affine_fwd, batchnorm_bwd, batchnorm_fwd, cross_entropy, dropout_mask, hadamard,
    log_softmax, relu_bwd, relu_fwd, softmax, softmax_in_place, Affine, BatchNorm, BatchNormCache, BATCHNORM_EPS,
    BATCHNORM_MOMENTUM,
};
pub use lstm::{
    bilstm_bwd, bilstm_fwd, lstm_bwd, lstm_cell_bwd, lstm_cell_fwd, lstm_fwd, BiLstmCache, CellCache, Lstm, LstmCache,
};
pub use tensor::{matmul, matmul_nt, matmul_tn, Tensor2};

use serde::{Deserialize, Serialize};

/// Anything holding trainable parameters with matching gradient buffers.
pub trait Parameterized {
    /// Calls `f(values, grads)` for every parameter tensor in a fixed order.
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &[f64]));

    fn zero_grad(&mut self);
}

impl<T: Parameterized> Parameterized for [T] {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &[f64])) {
        for p in self.iter_mut() {
            p.visit_params(f);
        }
    }

    fn zero_grad(&mut self) {
        self.iter_mut().for_each(Parameterized::zero_grad);
    }
}

/// Tagged parameter container, used where layers are handled generically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerParams {
    Affine(Affine),
    BatchNorm(BatchNorm),
    Lstm(Lstm),
}

impl Parameterized for LayerParams {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &[f64])) {
        match self {
            LayerParams::Affine(p) => p.visit_params(f),
            LayerParams::BatchNorm(p) => p.visit_params(f),
            LayerParams::Lstm(p) => p.visit_params(f),
        }
    }

    fn zero_grad(&mut self) {
        match self {
            LayerParams::Affine(p) => p.zero_grad(),
            LayerParams::BatchNorm(p) => p.zero_grad(),
            LayerParams::Lstm(p) => p.zero_grad(),
        }
    }
}

/// Central-difference gradient check with step 1e-5.
///
/// Returns the largest `|a - n| / max(1, |a|, |n|)` over all coordinates,
/// where `a` is the analytic and `n` the numeric derivative of `f` at `params`.
pub fn grad_check(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], analytic: &[f64]) -> f64 {
    assert_eq!(
        params.len(),
        analytic.len(),
        "grad_check: gradient length differs from parameters"
    );
    const STEP: f64 = 1e-5;
    let mut x = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + STEP;
        let up = f(&x);
        x[i] = orig - STEP;
        let down = f(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let a = analytic[i];
        let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(rel);
    }
    worst
}
