//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::HashMap;

use gestureforge_core::fingerspell::ctc_loss;
use gestureforge_core::landmark::FrameLandmarks;
use gestureforge_core::nn::{
    affine_bwd, affine_fwd, batchnorm_bwd, batchnorm_fwd, bilstm_bwd, bilstm_fwd, cross_entropy, grad_check,
    log_softmax, lstm_bwd, lstm_fwd, relu_bwd, relu_fwd, softmax, Affine, BatchNorm, Lstm, Tensor2,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor2 {
    Tensor2::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Remove consecutive duplicates, then blanks (class 0).
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for &c in path {
        if c != prev && c != 0 {
            out.push(c);
        }
        prev = c;
    }
    out
}

/// Probability mass of every collapsed label sequence, by enumerating all
/// `C^T` alignments of `log_probs` (T x C).
pub fn alignment_table(log_probs: &Tensor2) -> HashMap<Vec<usize>, f64> {
    let (t_len, classes) = log_probs.shape();
    let mut table = HashMap::new();
    let mut path = vec![0usize; t_len];
    loop {
        let p: f64 = path
            .iter()
            .enumerate()
            .map(|(t, &c)| log_probs.get(t, c))
            .sum::<f64>()
            .exp();
        *table.entry(collapse(&path)).or_insert(0.0) += p;
        let mut i = 0;
        loop {
            if i == t_len {
                return table;
            }
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Every label sequence over `1..=alphabet` with length at most `max_len`.
pub fn all_targets(alphabet: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for t in &frontier {
            for c in 1..=alphabet {
                let mut v: Vec<usize> = t.clone();
                v.push(c);
                next.push(v);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Largest |ctc_loss - brute force| over the full (T <= 6, A <= 4, |target| <= 3)
/// grid for one seed; targets that cannot fit must be flagged infeasible.
pub fn ctc_oracle_max_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for alphabet in 1..=4 {
        let targets = all_targets(alphabet, 3);
        for t_len in 1..=6 {
            let logits = Tensor2::from_fn(t_len, alphabet + 1, |_, _| r.random_range(-3.0..3.0));
            let lp = log_softmax(&logits);
            let table = alignment_table(&lp);
            for target in &targets {
                let got = ctc_loss(&lp, target).expect("valid target");
                match table.get(target) {
                    Some(&p) => {
                        assert!(!got.infeasible, "feasible target {target:?} at T={t_len} flagged");
                        worst = worst.max((got.loss - (-p.ln())).abs());
                    }
                    None => {
                        assert!(got.infeasible && got.loss == f64::INFINITY, "{target:?} at T={t_len}");
                    }
                }
            }
        }
    }
    worst
}

/// Loop-based MNAE: per landmark sqrt of squared differences over the truth scale.
pub fn mnae_oracle(pred: &[FrameLandmarks], truth: &[FrameLandmarks]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        let w = t.points[0];
        let m = t.points[9];
        let scale = ((w[0] - m[0]).powi(2) + (w[1] - m[1]).powi(2) + (w[2] - m[2]).powi(2)).sqrt();
        for j in 0..21 {
            let mut sq = 0.0;
            for c in 0..3 {
                sq += (p.points[j][c] - t.points[j][c]).powi(2);
            }
            sum += sq.sqrt() / scale;
            count += 1;
        }
    }
    100.0 * sum / count as f64
}

fn weighted_sum(y: &Tensor2, r: &Tensor2) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn with(t: &Tensor2, v: &[f64]) -> Tensor2 {
    Tensor2::new(t.rows(), t.cols(), v.to_vec()).expect("same shape")
}

pub fn affine_grad_error(seed: u64) -> f64 {
    let mut g = rng(seed);
    let x = random_tensor(&mut g, 4, 5);
    let mut p = Affine::glorot(5, 3, &mut g);
    let r = random_tensor(&mut g, 4, 3);
    let loss = |x: &Tensor2, p: &Affine| weighted_sum(&affine_fwd(x, p).unwrap(), &r);
    let dx = affine_bwd(&x, &r, &mut p).unwrap();
    let base = p.clone();
    let e1 = grad_check(|v| loss(&with(&x, v), &base), x.data(), dx.data());
    let e2 = grad_check(
        |v| {
            let mut q = base.clone();
            q.w = with(&base.w, v);
            loss(&x, &q)
        },
        base.w.data(),
        p.dw.as_ref().unwrap().data(),
    );
    let e3 = grad_check(
        |v| {
            let mut q = base.clone();
            q.b = with(&base.b, v);
            loss(&x, &q)
        },
        base.b.data(),
        p.db.as_ref().unwrap().data(),
    );
    e1.max(e2).max(e3)
}

pub fn batchnorm_grad_error(seed: u64) -> f64 {
    let mut g = rng(seed);
    let x = random_tensor(&mut g, 6, 4);
    let mut p = BatchNorm::new(4);
    p.gamma = random_tensor(&mut g, 1, 4);
    p.beta = random_tensor(&mut g, 1, 4);
    let r = random_tensor(&mut g, 6, 4);
    let base = p.clone();
    let loss = |x: &Tensor2, p: &BatchNorm| {
        let mut q = p.clone();
        weighted_sum(&batchnorm_fwd(x, &mut q, true).unwrap().0, &r)
    };
    let (_, cache) = batchnorm_fwd(&x, &mut p, true).unwrap();
    let dx = batchnorm_bwd(&r, &cache, &mut p).unwrap();
    let e1 = grad_check(|v| loss(&with(&x, v), &base), x.data(), dx.data());
    let e2 = grad_check(
        |v| {
            let mut q = base.clone();
            q.gamma = with(&base.gamma, v);
            loss(&x, &q)
        },
        base.gamma.data(),
        p.dgamma.as_ref().unwrap().data(),
    );
    let e3 = grad_check(
        |v| {
            let mut q = base.clone();
            q.beta = with(&base.beta, v);
            loss(&x, &q)
        },
        base.beta.data(),
        p.dbeta.as_ref().unwrap().data(),
    );
    e1.max(e2).max(e3)
}

/// ReLU (inputs kept away from the kink), softmax, log-softmax and
/// cross-entropy, each against its own numeric gradient.
pub fn activation_grad_error(seed: u64) -> f64 {
    let mut g = rng(seed);
    let x = Tensor2::from_fn(5, 6, |_, _| {
        let v: f64 = g.random_range(0.01..1.0);
        if g.random::<bool>() {
            v
        } else {
            -v
        }
    });
    let r = random_tensor(&mut g, 5, 6);

    let drelu = relu_bwd(&x, &r).unwrap();
    let e_relu = grad_check(|v| weighted_sum(&relu_fwd(&with(&x, v)), &r), x.data(), drelu.data());

    // d/dx sum(R * softmax(x)) = s * (R - rowsum(R * s))
    let s = softmax(&x);
    let dsoft = Tensor2::from_fn(5, 6, |i, j| {
        let dot: f64 = (0..6).map(|k| r.get(i, k) * s.get(i, k)).sum();
        s.get(i, j) * (r.get(i, j) - dot)
    });
    let e_soft = grad_check(|v| weighted_sum(&softmax(&with(&x, v)), &r), x.data(), dsoft.data());

    // d/dx sum(R * log_softmax(x)) = R - s * rowsum(R)
    let dlog = Tensor2::from_fn(5, 6, |i, j| {
        r.get(i, j) - s.get(i, j) * (0..6).map(|k| r.get(i, k)).sum::<f64>()
    });
    let e_log = grad_check(|v| weighted_sum(&log_softmax(&with(&x, v)), &r), x.data(), dlog.data());

    let targets: Vec<usize> = (0..5).map(|_| g.random_range(0..6)).collect();
    let (_, dce) = cross_entropy(&x, &targets).unwrap();
    let e_ce = grad_check(
        |v| cross_entropy(&with(&x, v), &targets).unwrap().0,
        x.data(),
        dce.data(),
    );
    e_relu.max(e_soft).max(e_log).max(e_ce)
}

fn random_lstm(g: &mut ChaCha8Rng, input: usize, hidden: usize) -> Lstm {
    let mut l = Lstm::init(input, hidden, g);
    l.b = random_tensor(g, 1, 4 * hidden);
    l
}

fn lstm_param_errors(base: &Lstm, grads: &Lstm, loss: &dyn Fn(&Lstm) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for which in 0..3 {
        let (vals, an) = match which {
            0 => (&base.wx, grads.dwx.as_ref().unwrap()),
            1 => (&base.wh, grads.dwh.as_ref().unwrap()),
            _ => (&base.b, grads.db.as_ref().unwrap()),
        };
        let e = grad_check(
            |v| {
                let mut q = base.clone();
                match which {
                    0 => q.wx = with(vals, v),
                    1 => q.wh = with(vals, v),
                    _ => q.b = with(vals, v),
                }
                loss(&q)
            },
            vals.data(),
            an.data(),
        );
        worst = worst.max(e);
    }
    worst
}

/// Full BPTT through a T=5 sequence.
pub fn lstm_grad_error(seed: u64) -> f64 {
    let mut g = rng(seed);
    let x = random_tensor(&mut g, 5, 3);
    let mut p = random_lstm(&mut g, 3, 4);
    let r = random_tensor(&mut g, 5, 4);
    let base = p.clone();
    let (_, cache) = lstm_fwd(&x, &p).unwrap();
    let dx = lstm_bwd(&r, &cache, &mut p).unwrap();
    let loss_x = |xv: &Tensor2, q: &Lstm| weighted_sum(&lstm_fwd(xv, q).unwrap().0, &r);
    let e_x = grad_check(|v| loss_x(&with(&x, v), &base), x.data(), dx.data());
    e_x.max(lstm_param_errors(&base, &p, &|q| loss_x(&x, q)))
}

pub fn bilstm_grad_error(seed: u64) -> f64 {
    let mut g = rng(seed);
    let x = random_tensor(&mut g, 5, 3);
    let mut f = random_lstm(&mut g, 3, 3);
    let mut b = random_lstm(&mut g, 3, 3);
    let r = random_tensor(&mut g, 5, 6);
    let (fb, bb) = (f.clone(), b.clone());
    let (_, cache) = bilstm_fwd(&x, &f, &b).unwrap();
    let dx = bilstm_bwd(&r, &cache, &mut f, &mut b).unwrap();
    let loss = |xv: &Tensor2, f: &Lstm, b: &Lstm| weighted_sum(&bilstm_fwd(xv, f, b).unwrap().0, &r);
    let e_x = grad_check(|v| loss(&with(&x, v), &fb, &bb), x.data(), dx.data());
    let e_f = lstm_param_errors(&fb, &f, &|q| loss(&x, q, &bb));
    let e_b = lstm_param_errors(&bb, &b, &|q| loss(&x, &fb, q));
    e_x.max(e_f).max(e_b)
}

/// Gradient of the CTC loss with respect to unnormalized logits.
pub fn ctc_grad_error(seed: u64) -> f64 {
    let mut g = rng(seed);
    let t_len = g.random_range(3..=7);
    let classes = g.random_range(2..=5);
    let len = g.random_range(1..=3usize.min(t_len / 2).max(1));
    let target: Vec<usize> = (0..len).map(|_| g.random_range(1..classes)).collect();
    let logits = Tensor2::from_fn(t_len, classes, |_, _| g.random_range(-2.0..2.0));
    let res = ctc_loss(&log_softmax(&logits), &target).unwrap();
    assert!(!res.infeasible);
    grad_check(
        |v| ctc_loss(&log_softmax(&with(&logits, v)), &target).unwrap().loss,
        logits.data(),
        res.grad.data(),
    )
}
