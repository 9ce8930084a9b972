//! Connectionist temporal classification: loss and gradient via log-space
//! forward-backward, and greedy decoding. Class 0 is the blank.

use crate::error::{Error, Result};
use crate::nn::Tensor2;

pub const BLANK: usize = 0;

#[derive(Debug, Clone)]
pub struct CtcLoss {
    /// `-log p(target | inputs)`; `+inf` when the target cannot fit.
    pub loss: f64,
    /// Gradient w.r.t. the logits that produced the log-probabilities (T x C).
    pub grad: Tensor2,
    pub infeasible: bool,
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Minimum number of frames needed to emit `target`: one per label plus a
/// separating blank between equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// CTC loss for one sequence. `log_probs` holds per-step log-softmax
/// outputs over `C = alphabet + 1` classes.
pub fn ctc_loss(log_probs: &Tensor2, target: &[usize]) -> Result<CtcLoss> {
    let (t_len, classes) = log_probs.shape();
    if t_len == 0 {
        return Err(Error::shape("ctc_loss", "empty input sequence"));
    }
    if let Some(&bad) = target.iter().find(|&&c| c == BLANK || c >= classes) {
        return Err(Error::InvalidArgument(format!(
            "target label {bad} outside 1..{classes}"
        )));
    }
    if min_frames(target) > t_len {
        return Ok(CtcLoss {
            loss: f64::INFINITY,
            grad: Tensor2::zeros(t_len, classes),
            infeasible: true,
        });
    }

    // Extended label sequence: blank, l1, blank, l2, ..., blank.
    let ext: Vec<usize> = std::iter::once(BLANK)
        .chain(target.iter().flat_map(|&c| [c, BLANK]))
        .collect();
    let s_len = ext.len();
    let can_skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];
    let lp = |t: usize, s: usize| log_probs.get(t, ext[s]);

    let neg = f64::NEG_INFINITY;
    let mut alpha = vec![neg; t_len * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if can_skip(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = if acc == neg { neg } else { acc + lp(t, s) };
        }
    }

    let mut beta = vec![neg; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = lp(t_len - 1, s_len - 1);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(t_len - 1, s_len - 2);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut acc = next[s];
            if s + 1 < s_len {
                acc = log_add(acc, next[s + 1]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                acc = log_add(acc, next[s + 2]);
            }
            beta[t * s_len + s] = if acc == neg { neg } else { acc + lp(t, s) };
        }
    }

    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }

    // d(-log p)/d logit[t,k] = softmax[t,k] - occupancy[t,k]
    let mut grad = log_probs.map(f64::exp);
    for t in 0..t_len {
        let mut occupancy = vec![neg; classes];
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == neg || b == neg {
                continue;
            }
            occupancy[ext[s]] = log_add(occupancy[ext[s]], a + b - lp(t, s));
        }
        let row = grad.row_mut(t);
        for (k, occ) in occupancy.iter().enumerate() {
            if *occ != neg {
                row[k] -= (occ - log_p).exp();
            }
        }
    }

    Ok(CtcLoss {
        loss: -log_p,
        grad,
        infeasible: false,
    })
}

/// Per-step argmax (lowest index wins ties), merge repeats, drop blanks.
pub fn greedy_decode(log_probs: &Tensor2) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..log_probs.rows() {
        let row = log_probs.row(t);
        let mut best = 0;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        if prev != Some(best) && best != BLANK {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

/// Levenshtein distance between two label sequences.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance normalized by the reference length.
pub fn character_error_rate(hypothesis: &[usize], reference: &[usize]) -> f64 {
    if reference.is_empty() {
        return if hypothesis.is_empty() { 0.0 } else { 1.0 };
    }
    edit_distance(hypothesis, reference) as f64 / reference.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::log_softmax;

    fn peaked(path: &[usize], classes: usize) -> Tensor2 {
        let logits = Tensor2::from_fn(path.len(), classes, |t, k| if k == path[t] { 20.0 } else { 0.0 });
        log_softmax(&logits)
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn single_step_uniform() {
        let lp = Tensor2::from_fn(1, 2, |_, _| 0.5f64.ln());
        let r = ctc_loss(&lp, &[1]).unwrap();
        assert!((r.loss - 0.693147).abs() < 1e-6);
        assert!((r.loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn infeasible_targets_are_flagged() {
        let lp = Tensor2::from_fn(2, 3, |_, _| (1.0f64 / 3.0).ln());
        let r = ctc_loss(&lp, &[1, 1]).unwrap();
        assert!(r.infeasible);
        assert!(r.loss.is_infinite());
        assert!(r.grad.data().iter().all(|&g| g == 0.0));
        assert!(!ctc_loss(&lp, &[1, 2]).unwrap().infeasible);
        assert_eq!(min_frames(&[1, 1, 2, 2, 2]), 8);
    }

    #[test]
    fn rejects_blank_or_out_of_range_labels() {
        let lp = Tensor2::from_fn(3, 3, |_, _| (1.0f64 / 3.0).ln());
        assert!(ctc_loss(&lp, &[0]).is_err());
        assert!(ctc_loss(&lp, &[3]).is_err());
    }

    #[test]
    fn greedy_collapse_rules() {
        assert_eq!(greedy_decode(&peaked(&[1, 1, 0, 2], 3)), vec![1, 2]);
        assert_eq!(greedy_decode(&peaked(&[0, 0, 0], 3)), Vec::<usize>::new());
        assert_eq!(greedy_decode(&peaked(&[1, 0, 1], 3)), vec![1, 1]);
        // Ties go to the lowest index.
        let tie = Tensor2::from_fn(2, 3, |_, k| if k == 0 { -1.0 } else { -0.5 });
        assert_eq!(greedy_decode(&tie), vec![1]);
    }

    #[test]
    fn certain_alignment_has_zero_loss() {
        let lp = Tensor2::from_fn(3, 3, |t, k| if k == [1, 0, 2][t] { 0.0 } else { f64::NEG_INFINITY });
        let r = ctc_loss(&lp, &[1, 2]).unwrap();
        assert_eq!(r.loss, 0.0);
    }

    #[test]
    fn edit_distance_basics() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(edit_distance(&[1, 3], &[1, 2, 3]), 1);
        assert_eq!(edit_distance(&[], &[1, 2]), 2);
        assert_eq!(character_error_rate(&[2, 2], &[1, 2]), 0.5);
    }
}
