use super::Mat;
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// Floor for the log argument and for the standard deviation.
pub const MVN_EPS: f64 = 1e-8;

/// `log(max(x, eps))`, then per-column (per frequency bin) mean and variance
/// normalization over the frames of the utterance.
pub fn log_mvn(magnitude: &Mat) -> Mat {
    let (rows, cols) = magnitude.shape();
    let logs: Vec<f64> = magnitude.data.iter().map(|v| v.max(MVN_EPS).ln()).collect();
    let mut mean = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            mean[c] += logs[r * cols + c];
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            let d = logs[r * cols + c] - mean[c];
            var[c] += d * d;
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / rows as f64).sqrt().max(MVN_EPS)).collect();
    let data = logs.iter().enumerate().map(|(i, v)| (v - mean[i % cols]) / std[i % cols]).collect();
    Mat { rows, cols, data }
}

/// Differentiable [`log_mvn`] on a `[T, D]` tensor; statistics take part in
/// the gradient.
pub fn log_mvn_tensor(x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 {
        return Err(dim_err!("log_mvn expects [T, D], got {:?}", x.shape()));
    }
    let logs = x.log_clamped(MVN_EPS);
    let centered = logs.sub(&logs.mean_axis(0)?)?;
    let std = centered.square().mean_axis(0)?.sqrt().clamp_min(MVN_EPS);
    centered.div(&std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn normalized_statistics() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let m = Mat::new(50, 6, (0..300).map(|_| rng.gen_range(0.01..3.0)).collect()).unwrap();
        let y = log_mvn(&m);
        for c in 0..6 {
            let col: Vec<f64> = (0..50).map(|r| y.data[r * 6 + c]).collect();
            let mean = col.iter().sum::<f64>() / 50.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0;
            assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_is_zero_and_scale_invariant() {
        assert!(log_mvn(&Mat::filled(7, 3, 2.5)).data.iter().all(|v| *v == 0.0));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let m = Mat::new(20, 4, (0..80).map(|_| rng.gen_range(0.01..3.0)).collect()).unwrap();
        let scaled = Mat::new(20, 4, m.data.iter().map(|v| v * 10.0).collect()).unwrap();
        let (a, b) = (log_mvn(&m), log_mvn(&scaled));
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| (x - y).abs() < 1e-6));
    }

    #[test]
    fn tensor_path_matches_plain() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let m = Mat::new(9, 5, (0..45).map(|_| rng.gen_range(0.0..2.0)).collect()).unwrap();
        let t = log_mvn_tensor(&m.to_tensor()).unwrap();
        let p = log_mvn(&m);
        assert!(t.data().iter().zip(&p.data).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}
