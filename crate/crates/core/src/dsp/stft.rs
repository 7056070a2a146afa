use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{AudioBuffer, Mask, Mat};
use crate::error::{cfg_err, dim_err, input_err, Result};

/// Framing geometry. Defaults: 25 ms frames, 10 ms shift, 512-point FFT,
/// periodic Hamming window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub frame_length: usize,
    pub hop: usize,
    pub fft_size: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { frame_length: 400, hop: 160, fft_size: 512 }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_length == 0 || self.hop == 0 {
            return Err(cfg_err!("frame length and hop must be positive"));
        }
        if self.frame_length > self.fft_size {
            return Err(cfg_err!("frame length {} exceeds FFT size {}", self.frame_length, self.fft_size));
        }
        if self.hop >= self.frame_length {
            return Err(cfg_err!("hop {} must be shorter than frame length {}", self.hop, self.frame_length));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn num_frames(&self, len: usize) -> usize {
        if len < self.frame_length {
            0
        } else {
            1 + (len - self.frame_length) / self.hop
        }
    }

    /// Number of samples a `frames`-frame spectrogram can synthesize.
    pub fn span(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.frame_length
        }
    }

    /// Periodic Hamming window, `0.54 - 0.46 cos(2 pi n / N)`.
    pub fn window(&self) -> Vec<f64> {
        let n = self.frame_length as f64;
        (0..self.frame_length).map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / n).cos()).collect()
    }
}

/// Complex `frames x bins` spectrogram.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub values: Vec<Complex64>,
}

impl Spectrogram {
    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self { frames, bins, values: vec![Complex64::new(0.0, 0.0); frames * bins] }
    }

    pub fn magnitude(&self) -> Mat {
        Mat { rows: self.frames, cols: self.bins, data: self.values.iter().map(|c| c.norm()).collect() }
    }

    pub fn energy(&self) -> f64 {
        self.values.iter().map(|c| c.norm_sqr()).sum()
    }
}

/// Reusable analysis/synthesis engine holding FFT plans and the window.
pub struct StftProcessor {
    cfg: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl StftProcessor {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            window: cfg.window(),
            forward: planner.plan_fft_forward(cfg.fft_size),
            inverse: planner.plan_fft_inverse(cfg.fft_size),
            cfg,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    pub fn stft(&self, audio: &AudioBuffer) -> Result<Spectrogram> {
        let cfg = &self.cfg;
        let x = audio.samples();
        if x.len() < cfg.frame_length {
            return Err(input_err!(
                "audio has {} samples, shorter than one {}-sample frame",
                x.len(),
                cfg.frame_length
            ));
        }
        let frames = cfg.num_frames(x.len());
        let bins = cfg.bins();
        let mut values = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
        for t in 0..frames {
            let start = t * cfg.hop;
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            for (n, w) in self.window.iter().enumerate() {
                buf[n].re = x[start + n] * w;
            }
            self.forward.process(&mut buf);
            values.extend_from_slice(&buf[..bins]);
        }
        Ok(Spectrogram { frames, bins, values })
    }

    /// Weighted overlap-add with squared-window normalization.
    pub fn istft(&self, spec: &Spectrogram, length: usize) -> Result<AudioBuffer> {
        let cfg = &self.cfg;
        if spec.bins != cfg.bins() {
            return Err(dim_err!("spectrogram has {} bins, config expects {}", spec.bins, cfg.bins()));
        }
        let span = cfg.span(spec.frames);
        if length > span {
            return Err(input_err!("requested {length} samples but {} frames only span {span}", spec.frames));
        }
        let n_fft = cfg.fft_size;
        let mut out = vec![0.0; span];
        let mut norm = vec![0.0; span];
        let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
        let scale = 1.0 / n_fft as f64;
        for t in 0..spec.frames {
            let row = &spec.values[t * spec.bins..(t + 1) * spec.bins];
            // Hermitian extension; DC and Nyquist bins must be real
            buf[0] = Complex64::new(row[0].re, 0.0);
            for k in 1..spec.bins - 1 {
                buf[k] = row[k];
                buf[n_fft - k] = row[k].conj();
            }
            let nyq = spec.bins - 1;
            buf[nyq] = Complex64::new(row[nyq].re, if n_fft.is_multiple_of(2) { 0.0 } else { row[nyq].im });
            if n_fft % 2 == 1 {
                buf[n_fft - nyq] = row[nyq].conj();
            }
            self.inverse.process(&mut buf);
            let start = t * cfg.hop;
            for (n, w) in self.window.iter().enumerate() {
                out[start + n] += buf[n].re * scale * w;
                norm[start + n] += w * w;
            }
        }
        out.truncate(length);
        for (o, n) in out.iter_mut().zip(&norm) {
            if *n > 1e-10 {
                *o /= n;
            }
        }
        AudioBuffer::new(out)
    }
}

pub fn stft(audio: &AudioBuffer, cfg: &StftConfig) -> Result<Spectrogram> {
    StftProcessor::new(*cfg)?.stft(audio)
}

pub fn istft(spec: &Spectrogram, cfg: &StftConfig, length: usize) -> Result<AudioBuffer> {
    StftProcessor::new(*cfg)?.istft(spec, length)
}

/// Scales each complex bin by the mask value; phase is untouched.
pub fn apply_mask(spec: &Spectrogram, mask: &Mask) -> Result<Spectrogram> {
    let m = mask.mat();
    if (m.rows, m.cols) != (spec.frames, spec.bins) {
        return Err(dim_err!(
            "mask is {}x{} but spectrogram is {}x{}",
            m.rows,
            m.cols,
            spec.frames,
            spec.bins
        ));
    }
    Ok(Spectrogram {
        frames: spec.frames,
        bins: spec.bins,
        values: spec.values.iter().zip(&m.data).map(|(c, w)| c * *w).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn dft_bin(x: &[f64], k: usize, n: usize) -> Complex64 {
        x.iter()
            .enumerate()
            .map(|(i, v)| Complex64::from_polar(*v, -2.0 * PI * (k * i) as f64 / n as f64))
            .sum()
    }

    #[test]
    fn geometry() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.bins(), 257);
        assert_eq!(cfg.num_frames(16000), 98);
        let spec = stft(&AudioBuffer::zeros(16000), &cfg).unwrap();
        assert_eq!((spec.frames, spec.bins), (98, 257));
        assert!(spec.values.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn too_short_is_input_error() {
        let err = stft(&AudioBuffer::zeros(399), &StftConfig::default()).unwrap_err();
        assert!(matches!(err, crate::Error::Input(_)));
    }

    #[test]
    fn constant_signal_matches_window_dft() {
        let cfg = StftConfig::default();
        let spec = stft(&AudioBuffer::new(vec![1.0; 800]).unwrap(), &cfg).unwrap();
        let w = cfg.window();
        let wsum: f64 = w.iter().sum();
        assert!((spec.values[0].re - wsum).abs() < 1e-9);
        for k in [1, 2, 5, 100, 256] {
            let expect = dft_bin(&w, k, 512);
            assert!((spec.values[k] - expect).norm() < 1e-9, "bin {k}");
        }
        let row = &spec.magnitude();
        let peak = (0..257).max_by(|a, b| row.data[*a].total_cmp(&row.data[*b])).unwrap();
        assert_eq!(peak, 0);
    }

    #[test]
    fn sinusoid_peaks_at_expected_bin() {
        let x: Vec<f64> = (0..4000).map(|n| (2.0 * PI * 1000.0 * n as f64 / 16000.0).sin()).collect();
        let spec = stft(&AudioBuffer::new(x).unwrap(), &StftConfig::default()).unwrap();
        let mag = spec.magnitude();
        for t in 0..spec.frames {
            let row = mag.row(t);
            let peak = (0..257).max_by(|a, b| row[*a].total_cmp(&row[*b])).unwrap();
            assert_eq!(peak, 32);
        }
    }

    #[test]
    fn round_trip_reconstructs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..16000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cfg = StftConfig::default();
        let audio = AudioBuffer::new(x.clone()).unwrap();
        let proc = StftProcessor::new(cfg).unwrap();
        let spec = proc.stft(&audio).unwrap();
        let span = cfg.span(spec.frames);
        let y = proc.istft(&spec, span).unwrap();
        let err = x[..span].iter().zip(y.samples()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "max err {err}");
        // unit mask is the identity
        let masked = apply_mask(&spec, &Mask::ones(spec.frames, spec.bins)).unwrap();
        assert_eq!(masked, spec);
        assert!(proc.istft(&spec, span + 1).is_err());
    }

    #[test]
    fn masks_scale_magnitude_keep_phase() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..1200).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let spec = stft(&AudioBuffer::new(x).unwrap(), &StftConfig::default()).unwrap();
        let half = Mask::new(Mat::filled(spec.frames, spec.bins, 0.5)).unwrap();
        let out = apply_mask(&spec, &half).unwrap();
        for (a, b) in spec.values.iter().zip(&out.values) {
            assert!((a.norm() * 0.5 - b.norm()).abs() < 1e-12);
            if a.norm() > 1e-9 {
                assert!((a.arg() - b.arg()).abs() < 1e-9);
            }
        }
        let zero = Mask::new(Mat::zeros(spec.frames, spec.bins)).unwrap();
        assert_eq!(apply_mask(&spec, &zero).unwrap().energy(), 0.0);
        let wrong = Mask::ones(spec.frames + 1, spec.bins);
        assert!(matches!(apply_mask(&spec, &wrong), Err(crate::Error::Dimension(_))));
        let silent = istft(&Spectrogram::zeros(4, 257), &StftConfig::default(), 800).unwrap();
        assert!(silent.samples().iter().all(|v| *v == 0.0));
    }
}
