use super::Mat;
use crate::error::{cfg_err, dim_err, Result};
use crate::tensor::{Backward, Tensor};

/// Linear mel filterbank, `bands x bins`, nonnegative.
///
/// Rows are sparse (each triangle touches a handful of bins), so the span of
/// nonzero columns per row is kept alongside the dense matrix and used by the
/// projections.
#[derive(Debug, Clone, PartialEq)]
pub struct MelTransform {
    matrix: Mat,
    spans: Vec<(usize, usize)>,
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl MelTransform {
    /// Triangular filters equally spaced on the mel scale between `fmin` and
    /// `fmax`, unit peak height.
    pub fn new(bands: usize, fft_size: usize, rate: u32, fmin: f64, fmax: f64) -> Result<Self> {
        if bands == 0 || fmax <= fmin || fmax > rate as f64 / 2.0 {
            return Err(cfg_err!("invalid mel geometry: {bands} bands over [{fmin}, {fmax}] Hz"));
        }
        let bins = fft_size / 2 + 1;
        let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges: Vec<f64> =
            (0..bands + 2).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (bands + 1) as f64)).collect();
        let bin_hz = rate as f64 / fft_size as f64;
        let mut data = vec![0.0; bands * bins];
        for m in 0..bands {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..bins {
                let f = k as f64 * bin_hz;
                let w = if f > l && f <= c {
                    (f - l) / (c - l)
                } else if f > c && f < r {
                    (r - f) / (r - c)
                } else {
                    0.0
                };
                data[m * bins + k] = w;
            }
        }
        Self::from_matrix(Mat { rows: bands, cols: bins, data })
    }

    /// 80 bands over 0-8 kHz for a 512-point FFT at 16 kHz.
    pub fn standard() -> Self {
        Self::new(80, 512, super::SAMPLE_RATE, 0.0, 8000.0).expect("standard mel geometry is valid")
    }

    pub fn identity(bins: usize) -> Self {
        let mut m = Mat::zeros(bins, bins);
        for i in 0..bins {
            m.data[i * bins + i] = 1.0;
        }
        Self::from_matrix(m).expect("identity is nonnegative")
    }

    pub fn from_matrix(matrix: Mat) -> Result<Self> {
        if matrix.data.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(cfg_err!("mel matrix must be finite and nonnegative"));
        }
        let spans = (0..matrix.rows)
            .map(|r| {
                let row = matrix.row(r);
                let first = row.iter().position(|v| *v != 0.0).unwrap_or(0);
                let last = row.iter().rposition(|v| *v != 0.0).map_or(0, |i| i + 1);
                (first, last.max(first))
            })
            .collect();
        Ok(Self { matrix, spans })
    }

    pub fn matrix(&self) -> &Mat {
        &self.matrix
    }

    pub fn bands(&self) -> usize {
        self.matrix.rows
    }

    pub fn bins(&self) -> usize {
        self.matrix.cols
    }

    fn project(&self, x: &[f64], frames: usize) -> Vec<f64> {
        let (d, f) = (self.bands(), self.bins());
        let mut out = vec![0.0; frames * d];
        for t in 0..frames {
            let row = &x[t * f..(t + 1) * f];
            for (m, &(s, e)) in self.spans.iter().enumerate() {
                let w = &self.matrix.data[m * f + s..m * f + e];
                out[t * d + m] = w.iter().zip(&row[s..e]).map(|(a, b)| a * b).sum();
            }
        }
        out
    }

    fn project_transpose(&self, g: &[f64], frames: usize) -> Vec<f64> {
        let (d, f) = (self.bands(), self.bins());
        let mut out = vec![0.0; frames * f];
        for t in 0..frames {
            let dst = &mut out[t * f..(t + 1) * f];
            for (m, &(s, e)) in self.spans.iter().enumerate() {
                let gv = g[t * d + m];
                let w = &self.matrix.data[m * f + s..m * f + e];
                for (o, w) in dst[s..e].iter_mut().zip(w) {
                    *o += gv * w;
                }
            }
        }
        out
    }
}

/// `magnitude x mel^T`: frames x bins to frames x bands, no logarithm.
pub fn feature_transform(magnitude: &Mat, mel: &MelTransform) -> Result<Mat> {
    if magnitude.cols != mel.bins() {
        return Err(dim_err!("magnitude has {} bins, mel transform expects {}", magnitude.cols, mel.bins()));
    }
    Mat::new(magnitude.rows, mel.bands(), mel.project(&magnitude.data, magnitude.rows))
}

struct MelProject(MelTransform);

impl Backward for MelProject {
    fn name(&self) -> &'static str {
        "mel_project"
    }

    fn backward(&self, parents: &[Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let frames = parents[0].shape()[0];
        vec![Some(self.0.project_transpose(grad, frames))]
    }
}

/// Differentiable [`feature_transform`] on a `[T, F]` tensor.
pub fn feature_transform_tensor(x: &Tensor, mel: &MelTransform) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 2 || s[1] != mel.bins() {
        return Err(dim_err!("feature transform expects [T, {}], got {s:?}", mel.bins()));
    }
    let out = mel.project(x.data(), s[0]);
    Ok(Tensor::from_op(out, vec![s[0], mel.bands()], vec![x.clone()], MelProject(mel.clone())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_filterbank_covers_band() {
        let mel = MelTransform::standard();
        assert_eq!((mel.bands(), mel.bins()), (80, 257));
        let m = mel.matrix();
        for r in 0..80 {
            assert!(m.row(r).iter().any(|v| *v > 0.0), "row {r} empty");
        }
        for k in 1..256 {
            assert!((0..80).any(|r| m.data[r * 257 + k] > 0.0), "column {k} uncovered");
        }
    }

    #[test]
    fn examples() {
        let mel = MelTransform::standard();
        let zero = feature_transform(&Mat::zeros(3, 257), &mel).unwrap();
        assert!(zero.data.iter().all(|v| *v == 0.0));
        let mag = Mat::new(2, 257, (0..514).map(|i| i as f64 * 0.01).collect()).unwrap();
        assert_eq!(feature_transform(&mag, &MelTransform::identity(257)).unwrap().data, mag.data);
        let mut impulse = Mat::zeros(1, 257);
        impulse.data[40] = 1.0;
        let col: Vec<f64> = (0..80).map(|r| mel.matrix().data[r * 257 + 40]).collect();
        assert_eq!(feature_transform(&impulse, &mel).unwrap().data, col);
        assert!(feature_transform(&Mat::zeros(1, 256), &mel).is_err());
    }

    #[test]
    fn sparse_projection_matches_dense() {
        let mel = MelTransform::standard();
        let mag = Mat::new(2, 257, (0..514).map(|i| ((i * 7919) % 101) as f64).collect()).unwrap();
        let fast = feature_transform(&mag, &mel).unwrap();
        for t in 0..2 {
            for m in 0..80 {
                let dense: f64 = (0..257).map(|k| mag.data[t * 257 + k] * mel.matrix().data[m * 257 + k]).sum();
                assert!((dense - fast.data[t * 80 + m]).abs() < 1e-9);
            }
        }
    }
}
