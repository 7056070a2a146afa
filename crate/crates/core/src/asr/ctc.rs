//! Connectionist temporal classification loss, forward-backward in log space.

use crate::error::{dim_err, Result};
use crate::tensor::{Backward, Tensor};

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn extended(target: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &t in target {
        ext.push(t);
        ext.push(blank);
    }
    ext
}

/// Smallest number of frames able to emit `target`: one per label plus one
/// blank between every repeated pair.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

struct Lattice {
    log_alpha: Vec<f64>,
    log_beta: Vec<f64>,
    log_p: f64,
    ext: Vec<usize>,
}

/// `log_alpha[t][s]` includes the emission at `t`; `log_beta[t][s]` is the
/// log probability of finishing from state `s` after frame `t`.
fn lattice(lp: &[f64], t_len: usize, v: usize, target: &[usize], blank: usize) -> Lattice {
    let ext = extended(target, blank);
    let s_len = ext.len();
    let ninf = f64::NEG_INFINITY;
    let skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    let mut a = vec![ninf; t_len * s_len];
    a[0] = lp[ext[0]];
    if s_len > 1 {
        a[1] = lp[ext[1]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &a[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = lse2(acc, prev[s - 1]);
            }
            if skip(s) {
                acc = lse2(acc, prev[s - 2]);
            }
            a[t * s_len + s] = if acc == ninf { ninf } else { acc + lp[t * v + ext[s]] };
        }
    }
    let mut b = vec![ninf; t_len * s_len];
    let last = (t_len - 1) * s_len;
    b[last + s_len - 1] = 0.0;
    if s_len > 1 {
        b[last + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = |s2: usize| b[(t + 1) * s_len + s2] + lp[(t + 1) * v + ext[s2]];
            let mut acc = next(s);
            if s + 1 < s_len {
                acc = lse2(acc, next(s + 1));
            }
            if s + 2 < s_len && skip(s + 2) {
                acc = lse2(acc, next(s + 2));
            }
            b[t * s_len + s] = acc;
        }
    }
    let mut log_p = a[last + s_len - 1];
    if s_len > 1 {
        log_p = lse2(log_p, a[last + s_len - 2]);
    }
    Lattice { log_alpha: a, log_beta: b, log_p, ext }
}

/// Negative log-likelihood of `target` under per-frame log-probabilities
/// `lp` (`[T, V]`, row-major). Returns `+inf` when no alignment exists.
pub fn ctc_nll(lp: &[f64], t_len: usize, v: usize, target: &[usize], blank: usize) -> f64 {
    -lattice(lp, t_len, v, target, blank).log_p
}

struct Ctc {
    target: Vec<usize>,
    blank: usize,
}

impl Backward for Ctc {
    fn name(&self) -> &'static str {
        "ctc"
    }

    fn backward(&self, parents: &[Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let x = &parents[0];
        let (t_len, v) = (x.shape()[0], x.shape()[1]);
        let lat = lattice(x.data(), t_len, v, &self.target, self.blank);
        let mut g = vec![0.0; t_len * v];
        if lat.log_p.is_finite() {
            let s_len = lat.ext.len();
            for t in 0..t_len {
                for s in 0..s_len {
                    let la = lat.log_alpha[t * s_len + s] + lat.log_beta[t * s_len + s];
                    if la > f64::NEG_INFINITY {
                        g[t * v + lat.ext[s]] -= grad[0] * (la - lat.log_p).exp();
                    }
                }
            }
        }
        vec![Some(g)]
    }
}

/// Differentiable CTC loss on `[T, V]` log-probabilities. An unreachable
/// target yields `+inf` with a warning and contributes no gradient.
pub fn ctc_loss(log_probs: &Tensor, target: &[usize], blank: usize) -> Result<Tensor> {
    let (t_len, v) = match log_probs.shape() {
        [t, v] => (*t, *v),
        s => return Err(dim_err!("ctc_loss expects [T, V], got {s:?}")),
    };
    if blank >= v || target.iter().any(|&k| k >= v || k == blank) {
        return Err(dim_err!("ctc target {target:?} invalid for vocabulary of {v} with blank {blank}"));
    }
    let nll = ctc_nll(log_probs.data(), t_len, v, target, blank);
    if nll.is_infinite() {
        log::warn!("ctc target of length {} unreachable in {t_len} frames", target.len());
    }
    Ok(Tensor::from_op(vec![nll], vec![1], vec![log_probs.clone()], Ctc { target: target.to_vec(), blank }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_examples() {
        // blank = 0, "a" = 1
        let lp = [0.6f64.ln(), 0.4f64.ln()];
        assert!((ctc_nll(&lp, 1, 2, &[1], 0) + 0.4f64.ln()).abs() < 1e-12);
        let half = 0.5f64.ln();
        assert!((ctc_nll(&[half; 4], 2, 2, &[1], 0) + 0.75f64.ln()).abs() < 1e-12);
        let lp = [0.7f64.ln(), 0.3f64.ln(), 0.2f64.ln(), 0.8f64.ln()];
        assert!((ctc_nll(&lp, 2, 2, &[], 0) + 0.7f64.ln() + 0.2f64.ln()).abs() < 1e-12);
        assert_eq!(ctc_nll(&[half; 4], 2, 2, &[1, 1], 0), f64::INFINITY);
        assert_eq!(min_frames(&[1, 1, 2]), 4);
    }

    #[test]
    fn unreachable_target_is_sentinel_without_gradient() {
        let x = Tensor::param(vec![0.5f64.ln(); 4], &[2, 2]);
        let l = ctc_loss(&x, &[1, 1], 0).unwrap();
        assert_eq!(l.item(), f64::INFINITY);
        l.backward().unwrap();
        assert!(x.grad().unwrap().iter().all(|g| *g == 0.0));
    }
}
