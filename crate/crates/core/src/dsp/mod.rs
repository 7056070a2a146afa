//! Waveform and time-frequency plumbing: STFT analysis/synthesis, masking,
//! the linear mel feature transform, log-MVN input features, and WAV I/O.

mod features;
mod mel;
mod stft;
pub mod wav;

pub use features::{log_mvn, log_mvn_tensor, MVN_EPS};
pub use mel::{feature_transform, feature_transform_tensor, MelTransform};
pub use stft::{apply_mask, istft, stft, Spectrogram, StftConfig, StftProcessor};

use crate::error::{dim_err, input_err, Result};

/// Sample rate used throughout.
pub const SAMPLE_RATE: u32 = 16_000;

/// Mono waveform at [`SAMPLE_RATE`].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(input_err!("non-finite audio sample at index {i}"));
        }
        Ok(Self { samples })
    }

    pub fn zeros(len: usize) -> Self {
        Self { samples: vec![0.0; len] }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }
}

/// Dense row-major real matrix (frames × bins, frames × mel bands, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(dim_err!("{} values cannot fill a {rows}x{cols} matrix", data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn frobenius_dist(&self, other: &Mat) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }

    pub fn hadamard(&self, other: &Mat) -> Result<Mat> {
        if self.shape() != other.shape() {
            return Err(dim_err!("shape mismatch {:?} vs {:?}", self.shape(), other.shape()));
        }
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect(),
        })
    }

    pub fn to_tensor(&self) -> crate::Tensor {
        crate::Tensor::new(self.data.clone(), &[self.rows, self.cols])
    }
}

/// Real time-frequency mask with every entry in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask(Mat);

impl Mask {
    pub fn new(m: Mat) -> Result<Self> {
        if let Some(v) = m.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(input_err!("mask value {v} outside [0, 1]"));
        }
        Ok(Self(m))
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self(Mat::filled(rows, cols, 1.0))
    }

    /// Ideal amplitude mask `|X| / |Y|` clamped to `[0, 1]`.
    pub fn ideal_amplitude(target: &Mat, mixture: &Mat) -> Result<Self> {
        if target.shape() != mixture.shape() {
            return Err(dim_err!("shape mismatch {:?} vs {:?}", target.shape(), mixture.shape()));
        }
        let data = target
            .data
            .iter()
            .zip(&mixture.data)
            .map(|(x, y)| if *y > 0.0 { (x / y).clamp(0.0, 1.0) } else { 0.0 })
            .collect();
        Ok(Self(Mat { rows: target.rows, cols: target.cols, data }))
    }

    pub fn mat(&self) -> &Mat {
        &self.0
    }

    pub fn into_mat(self) -> Mat {
        self.0
    }
}
