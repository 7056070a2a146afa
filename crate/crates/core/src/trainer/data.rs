//! Training examples with precomputed spectra, and the seeded data order.

use std::borrow::Cow;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dsp::Mat;
use crate::error::{input_err, Result};
use crate::separator::Frontend;
use crate::simulate::{generate_sample, load_entry, read_manifest, MixtureSample, MixtureType, SimConfig};
use crate::tensor::Tensor;

/// One mixture reduced to what the losses need.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub kind: MixtureType,
    pub frames: usize,
    pub bins: usize,
    /// `|Y|`, row-major `[T, F]`.
    pub magnitude: Vec<f64>,
    /// Normalized log spectrogram fed to the separator.
    pub features: Vec<f64>,
    /// `|X_c|` per output; missing speakers are zero.
    pub refs: Vec<Vec<f64>>,
    /// Transcripts of the real speakers, aligned with the first `refs`.
    pub transcripts: Vec<Vec<usize>>,
}

impl Example {
    pub fn from_sample(sample: &MixtureSample, frontend: &Frontend, outputs: usize) -> Result<Self> {
        if sample.images.len() > outputs {
            return Err(input_err!("{} has {} speakers but the model has {outputs} outputs", sample.id, sample.images.len()));
        }
        let a = frontend.analyze(&sample.mixture)?;
        let (frames, bins) = a.magnitude.shape();
        let mut refs: Vec<Vec<f64>> = sample
            .images
            .iter()
            .map(|img| Ok(frontend.stft.stft(img)?.magnitude().data))
            .collect::<Result<_>>()?;
        refs.resize(outputs, vec![0.0; frames * bins]);
        Ok(Self {
            id: sample.id.clone(),
            kind: sample.kind,
            frames,
            bins,
            magnitude: a.magnitude.data,
            features: a.features.data,
            refs,
            transcripts: sample.transcripts.clone(),
        })
    }

    pub fn speakers(&self) -> usize {
        self.transcripts.len()
    }

    fn tensor(&self, v: &[f64]) -> Tensor {
        Tensor::new(v.to_vec(), &[self.frames, self.bins])
    }

    pub fn magnitude_tensor(&self) -> Tensor {
        self.tensor(&self.magnitude)
    }

    pub fn feature_tensor(&self) -> Tensor {
        self.tensor(&self.features)
    }

    pub fn ref_tensors(&self) -> Vec<Tensor> {
        self.refs.iter().map(|r| self.tensor(r)).collect()
    }

    pub fn mat(&self, v: &[f64]) -> Mat {
        Mat { rows: self.frames, cols: self.bins, data: v.to_vec() }
    }

    pub fn ref_mats(&self) -> Vec<Mat> {
        self.refs.iter().map(|r| self.mat(r)).collect()
    }
}

/// Mixtures drawn from the simulator on demand instead of held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    pub cfg: SimConfig,
    pub seed: u64,
    pub count: usize,
    pub outputs: usize,
}

/// Training examples, either precomputed or simulated on access.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub synthetic: Option<Synthetic>,
}

impl Dataset {
    pub fn from_samples(samples: &[MixtureSample], frontend: &Frontend, outputs: usize) -> Result<Self> {
        let examples = samples.iter().map(|s| Example::from_sample(s, frontend, outputs)).collect::<Result<_>>()?;
        Ok(Self { examples, synthetic: None })
    }

    /// `count` simulated mixtures, generated whenever they are visited.
    pub fn synthetic(cfg: SimConfig, seed: u64, count: usize, outputs: usize) -> Self {
        Self { examples: Vec::new(), synthetic: Some(Synthetic { cfg, seed, count, outputs }) }
    }

    /// Example `i`, simulating it if the set is synthetic.
    pub fn get(&self, i: usize, frontend: &Frontend) -> Result<Cow<'_, Example>> {
        match &self.synthetic {
            Some(s) => Ok(Cow::Owned(Example::from_sample(&generate_sample(&s.cfg, s.seed, i as u64)?, frontend, s.outputs)?)),
            None => Ok(Cow::Borrowed(&self.examples[i])),
        }
    }

    /// Loads every entry of a JSONL manifest, optionally only the first
    /// `limit`.
    pub fn load(manifest: &Path, frontend: &Frontend, outputs: usize, limit: Option<usize>) -> Result<Self> {
        let base = manifest.parent().unwrap_or(Path::new("."));
        let mut entries = read_manifest(manifest)?;
        if let Some(n) = limit {
            entries.truncate(n);
        }
        if entries.is_empty() {
            return Err(input_err!("manifest {} lists no samples", manifest.display()));
        }
        let mut examples = Vec::with_capacity(entries.len());
        for e in &entries {
            examples.push(Example::from_sample(&load_entry(e, base)?, frontend, outputs)?);
        }
        Ok(Self { examples, synthetic: None })
    }

    pub fn len(&self) -> usize {
        self.synthetic.as_ref().map_or(self.examples.len(), |s| s.count)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Visits examples epoch by epoch, each epoch shuffled from `(seed, epoch)`.
pub struct Sampler {
    seed: u64,
    len: usize,
    epoch: u64,
    order: Vec<usize>,
}

impl Sampler {
    pub fn new(seed: u64, len: usize) -> Self {
        Self { seed, len, epoch: u64::MAX, order: Vec::new() }
    }

    pub fn epoch_order(seed: u64, epoch: u64, len: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0da7a);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Example index at absolute position `n` of the data stream.
    pub fn at(&mut self, n: u64) -> usize {
        let epoch = n / self.len as u64;
        if epoch != self.epoch {
            self.order = Self::epoch_order(self.seed, epoch, self.len);
            self.epoch = epoch;
        }
        self.order[(n % self.len as u64) as usize]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = Sampler::new(4, 7);
        let mut first: Vec<usize> = (0..7).map(|n| s.at(n)).collect();
        let second: Vec<usize> = (7..14).map(|n| s.at(n)).collect();
        assert_ne!(first, second);
        first.sort();
        assert_eq!(first, (0..7).collect::<Vec<_>>());
        assert_eq!(Sampler::new(4, 7).at(9), second[2]);
    }
}
