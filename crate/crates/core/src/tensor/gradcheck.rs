//! Central finite-difference oracle for reverse-mode gradients.
//!
//! Only forward evaluation is used to build the numeric estimate, so the
//! check stays independent of every backward rule it audits.

use super::Tensor;
use crate::error::Result;

/// Tolerances for comparing analytic and numeric gradients.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub step: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { step: 1e-5, rtol: 1e-4, atol: 1e-7 }
    }
}

/// Worst disagreement found by a check.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub failures: usize,
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

impl GradCheck {
    /// Compares the gradients of `f` (which must return a one-element
    /// tensor) with respect to every input. `coords` limits how many entries
    /// per input are probed; entries are visited with a fixed stride so large
    /// inputs are sampled evenly.
    pub fn run<F>(&self, inputs: &[(Vec<f64>, Vec<usize>)], coords: Option<usize>, f: F) -> Result<GradReport>
    where
        F: Fn(&[Tensor]) -> Result<Tensor>,
    {
        let params: Vec<Tensor> =
            inputs.iter().map(|(d, s)| Tensor::try_new(d.clone(), s, true)).collect::<Result<_>>()?;
        let out = f(&params)?;
        out.backward()?;
        let analytic: Vec<Vec<f64>> =
            params.iter().map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()])).collect();

        let eval = |which: usize, idx: usize, delta: f64| -> Result<f64> {
            let probe: Vec<Tensor> = inputs
                .iter()
                .enumerate()
                .map(|(i, (d, s))| {
                    let mut d = d.clone();
                    if i == which {
                        d[idx] += delta;
                    }
                    Tensor::new(d, s)
                })
                .collect();
            Ok(f(&probe)?.item())
        };

        let mut report =
            GradReport { max_rel_err: 0.0, max_abs_err: 0.0, checked: 0, failures: 0, worst: None };
        for (which, (data, _)) in inputs.iter().enumerate() {
            let n = data.len();
            let stride = coords.map_or(1, |c| (n / c.max(1)).max(1));
            for idx in (0..n).step_by(stride) {
                let numeric = (eval(which, idx, self.step)? - eval(which, idx, -self.step)?) / (2.0 * self.step);
                let a = analytic[which][idx];
                let abs = (a - numeric).abs();
                let rel = abs / a.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
                report.checked += 1;
                report.max_abs_err = report.max_abs_err.max(abs);
                if abs > self.atol {
                    report.max_rel_err = report.max_rel_err.max(rel);
                    if rel > self.rtol {
                        report.failures += 1;
                        if report.worst.is_none_or(|w| rel > (w.2 - w.3).abs() / w.2.abs().max(w.3.abs())) {
                            report.worst = Some((which, idx, a, numeric));
                        }
                    }
                }
            }
        }
        Ok(report)
    }
}
