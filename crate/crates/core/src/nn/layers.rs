use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor2};
use super::Parameterized;
use crate::error::{Error, Result};

/// Dense layer `y = x·W + b` with accumulated gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub w: Tensor2,
    pub b: Tensor2,
    #[serde(skip)]
    pub dw: Option<Tensor2>,
    #[serde(skip)]
    pub db: Option<Tensor2>,
}

impl Affine {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Affine {
            w: Tensor2::zeros(fan_in, fan_out),
            b: Tensor2::zeros(1, fan_out),
            dw: None,
            db: None,
        }
    }

    /// Glorot-uniform weights in ±sqrt(6 / (fan_in + fan_out)), zero bias.
    pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Tensor2::from_fn(fan_in, fan_out, |_, _| rng.random_range(-limit..limit));
        Affine {
            w,
            b: Tensor2::zeros(1, fan_out),
            dw: None,
            db: None,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.cols()
    }
}

impl Parameterized for Affine {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &[f64])) {
        let dw = self
            .dw
            .get_or_insert_with(|| Tensor2::zeros(self.w.rows(), self.w.cols()));
        f(self.w.data_mut(), dw.data());
        let db = self.db.get_or_insert_with(|| Tensor2::zeros(1, self.b.cols()));
        f(self.b.data_mut(), db.data());
    }

    fn zero_grad(&mut self) {
        self.dw = None;
        self.db = None;
    }
}

pub fn affine_fwd(x: &Tensor2, p: &Affine) -> Result<Tensor2> {
    if x.cols() != p.fan_in() {
        return Err(Error::shape(
            "affine_fwd",
            format!("input has {} columns, layer expects {}", x.cols(), p.fan_in()),
        ));
    }
    let mut y = matmul(x, &p.w)?;
    let b = p.b.data();
    for r in 0..y.rows() {
        for (v, bias) in y.row_mut(r).iter_mut().zip(b) {
            *v += bias;
        }
    }
    Ok(y)
}

/// Accumulates `dW`, `db` into `p` and returns `dX`.
pub fn affine_bwd(x: &Tensor2, dy: &Tensor2, p: &mut Affine) -> Result<Tensor2> {
    affine_bwd_params(x, dy, p)?;
    matmul_nt(dy, &p.w)
}

/// Like [`affine_bwd`] but skips the input gradient.
pub fn affine_bwd_params(x: &Tensor2, dy: &Tensor2, p: &mut Affine) -> Result<()> {
    if dy.cols() != p.fan_out() || dy.rows() != x.rows() || x.cols() != p.fan_in() {
        return Err(Error::shape(
            "affine_bwd",
            format!("x {:?}, dy {:?}, W {:?}", x.shape(), dy.shape(), p.w.shape()),
        ));
    }
    let dw = matmul_tn(x, dy)?;
    match &mut p.dw {
        Some(acc) => acc.add_assign(&dw)?,
        None => p.dw = Some(dw),
    }
    let db = p.db.get_or_insert_with(|| Tensor2::zeros(1, dy.cols()));
    let db = db.data_mut();
    for r in 0..dy.rows() {
        for (acc, g) in db.iter_mut().zip(dy.row(r)) {
            *acc += g;
        }
    }
    Ok(())
}

/// Per-column batch normalization with learned scale/shift and running statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Tensor2,
    pub beta: Tensor2,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Weight of the previous running value in each update.
    pub momentum: f64,
    pub eps: f64,
    #[serde(skip)]
    pub dgamma: Option<Tensor2>,
    #[serde(skip)]
    pub dbeta: Option<Tensor2>,
}

pub const BATCHNORM_MOMENTUM: f64 = 0.9;
pub const BATCHNORM_EPS: f64 = 1e-7;

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        BatchNorm {
            gamma: Tensor2::from_fn(1, width, |_, _| 1.0),
            beta: Tensor2::zeros(1, width),
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            momentum: BATCHNORM_MOMENTUM,
            eps: BATCHNORM_EPS,
            dgamma: None,
            dbeta: None,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.cols()
    }
}

impl Parameterized for BatchNorm {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &[f64])) {
        let w = self.width();
        let dg = self.dgamma.get_or_insert_with(|| Tensor2::zeros(1, w));
        f(self.gamma.data_mut(), dg.data());
        let db = self.dbeta.get_or_insert_with(|| Tensor2::zeros(1, w));
        f(self.beta.data_mut(), db.data());
    }

    fn zero_grad(&mut self) {
        self.dgamma = None;
        self.dbeta = None;
    }
}

/// Saved forward state for [`batchnorm_bwd`].
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    xhat: Tensor2,
    inv_std: Vec<f64>,
    training: bool,
}

pub fn batchnorm_fwd(x: &Tensor2, p: &mut BatchNorm, training: bool) -> Result<(Tensor2, BatchNormCache)> {
    let (n, d) = x.shape();
    if d != p.width() {
        return Err(Error::shape(
            "batchnorm_fwd",
            format!("input width {d}, layer width {}", p.width()),
        ));
    }
    let (mean, var) = if training {
        if n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        for c in 0..d {
            p.running_mean[c] = p.momentum * p.running_mean[c] + (1.0 - p.momentum) * mean[c];
            p.running_var[c] = p.momentum * p.running_var[c] + (1.0 - p.momentum) * var[c];
        }
        (mean, var)
    } else {
        (p.running_mean.clone(), p.running_var.clone())
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + p.eps).sqrt()).collect();
    let mut xhat = Tensor2::zeros(n, d);
    let mut y = Tensor2::zeros(n, d);
    let (g, b) = (p.gamma.data(), p.beta.data());
    for r in 0..n {
        let xr = x.row(r);
        let hr = xhat.row_mut(r);
        for c in 0..d {
            hr[c] = (xr[c] - mean[c]) * inv_std[c];
        }
        let yr = y.row_mut(r);
        for c in 0..d {
            yr[c] = xhat.get(r, c) * g[c] + b[c];
        }
    }
    Ok((
        y,
        BatchNormCache {
            xhat,
            inv_std,
            training,
        },
    ))
}

pub fn batchnorm_bwd(dy: &Tensor2, cache: &BatchNormCache, p: &mut BatchNorm) -> Result<Tensor2> {
    let (n, d) = cache.xhat.shape();
    if dy.shape() != (n, d) {
        return Err(Error::shape(
            "batchnorm_bwd",
            format!("dy {:?} vs {:?}", dy.shape(), (n, d)),
        ));
    }
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    for r in 0..n {
        for c in 0..d {
            dgamma[c] += dy.get(r, c) * cache.xhat.get(r, c);
            dbeta[c] += dy.get(r, c);
        }
    }
    let g = p.gamma.data().to_vec();
    let mut dx = Tensor2::zeros(n, d);
    if cache.training {
        let nf = n as f64;
        for r in 0..n {
            for c in 0..d {
                let dxhat = dy.get(r, c) * g[c];
                let v =
                    (nf * dxhat - dbeta[c] * g[c] - cache.xhat.get(r, c) * dgamma[c] * g[c]) * cache.inv_std[c] / nf;
                dx.set(r, c, v);
            }
        }
    } else {
        for r in 0..n {
            for c in 0..d {
                dx.set(r, c, dy.get(r, c) * g[c] * cache.inv_std[c]);
            }
        }
    }
    let acc = p.dgamma.get_or_insert_with(|| Tensor2::zeros(1, d));
    acc.data_mut().iter_mut().zip(&dgamma).for_each(|(a, v)| *a += v);
    let acc = p.dbeta.get_or_insert_with(|| Tensor2::zeros(1, d));
    acc.data_mut().iter_mut().zip(&dbeta).for_each(|(a, v)| *a += v);
    Ok(dx)
}

pub fn relu_fwd(x: &Tensor2) -> Tensor2 {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Gradient of ReLU given the forward input `x`.
pub fn relu_bwd(x: &Tensor2, dy: &Tensor2) -> Result<Tensor2> {
    if x.shape() != dy.shape() {
        return Err(Error::shape("relu_bwd", format!("{:?} vs {:?}", x.shape(), dy.shape())));
    }
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor2::new(x.rows(), x.cols(), data)
}

/// Row-wise softmax.
pub fn softmax(x: &Tensor2) -> Tensor2 {
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// Row-wise log-softmax.
pub fn log_softmax(x: &Tensor2) -> Tensor2 {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// Mean softmax cross-entropy over rows; returns the loss and `d loss / d logits`.
pub fn cross_entropy(logits: &Tensor2, targets: &[usize]) -> Result<(f64, Tensor2)> {
    if logits.rows() != targets.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} rows vs {} targets", logits.rows(), targets.len()),
        ));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= logits.cols()) {
        return Err(Error::shape(
            "cross_entropy",
            format!("target {t} out of {} classes", logits.cols()),
        ));
    }
    let n = logits.rows() as f64;
    let logp = log_softmax(logits);
    let mut grad = logp.map(f64::exp);
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        loss -= logp.get(r, t);
        let row = grad.row_mut(r);
        row[t] -= 1.0;
        row.iter_mut().for_each(|g| *g /= n);
    }
    Ok((loss / n, grad))
}

/// Inverted-dropout mask: kept entries are `1 / (1 - rate)`, dropped are 0.
pub fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut impl Rng) -> Tensor2 {
    let keep = 1.0 - rate;
    Tensor2::from_fn(
        rows,
        cols,
        |_, _| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 },
    )
}

pub fn hadamard(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    if a.shape() != b.shape() {
        return Err(Error::shape("hadamard", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor2::new(a.rows(), a.cols(), data)
}
