//! Conformer mask estimator: normalized log spectrogram in, one sigmoid mask
//! per speaker out.

pub mod block;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use block::{conformer_block, conv_module_se, mhsa_relpos, BlockDims};

use crate::dsp::{apply_mask, log_mvn, AudioBuffer, Mask, Mat, Spectrogram, StftProcessor};
use crate::error::{cfg_err, dim_err, Error, Result};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{Bound, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformerConfig {
    pub layers: usize,
    pub attn_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub conv_kernel: usize,
    pub conv_channels: usize,
    pub speakers: usize,
    pub fft_bins: usize,
    pub rel_pos_window: usize,
    pub se_reduction: usize,
}

impl ConformerConfig {
    /// 16 layers of width 256, 4 heads, FFN 1024, conv kernel 33 with 512
    /// channels.
    pub fn base() -> Self {
        Self {
            layers: 16,
            attn_dim: 256,
            heads: 4,
            ffn_dim: 1024,
            conv_kernel: 33,
            conv_channels: 512,
            speakers: 2,
            fft_bins: 257,
            rel_pos_window: 377,
            se_reduction: 8,
        }
    }

    /// The base geometry cut to 6 layers.
    pub fn small() -> Self {
        Self { layers: 6, ..Self::base() }
    }

    /// Narrow model for single-core experiments.
    pub fn toy(layers: usize) -> Self {
        Self {
            layers,
            attn_dim: 32,
            heads: 2,
            ffn_dim: 64,
            conv_kernel: 7,
            conv_channels: 32,
            speakers: 2,
            fft_bins: 257,
            rel_pos_window: 16,
            se_reduction: 8,
        }
    }

    pub fn block_dims(&self) -> BlockDims {
        BlockDims {
            dim: self.attn_dim,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            conv_channels: self.conv_channels,
            conv_kernel: self.conv_kernel,
            rel_window: self.rel_pos_window,
            se_reduction: self.se_reduction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block_dims().validate()?;
        if self.layers == 0 || self.speakers == 0 || self.fft_bins == 0 {
            return Err(cfg_err!("layers, speakers and fft_bins must be positive"));
        }
        Ok(())
    }

    /// Total scalar parameters, including the input and output projections.
    pub fn param_count(&self) -> usize {
        let (d, f, c) = (self.attn_dim, self.fft_bins, self.speakers);
        self.layers * self.block_dims().param_count() + (f * d + d) + (d * c * f + c * f)
    }

    /// Stable 64-bit FNV-1a digest of the JSON form.
    pub fn fingerprint(&self) -> String {
        fingerprint(&serde_json::to_string(self).expect("config serializes"))
    }
}

pub(crate) fn fingerprint(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Encoder output after every layer, `[T, attn_dim]` each.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub hidden: Vec<Tensor>,
}

impl LayerTrace {
    pub fn len(&self) -> usize {
        self.hidden.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.is_empty()
    }
}

pub fn layer_prefix(i: usize) -> String {
    format!("l{i}")
}

/// Creates a parameter store for `cfg`, deterministic in `seed`.
pub fn init_params(cfg: &ConformerConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    block::init_linear(&mut store, "in", cfg.fft_bins, cfg.attn_dim, &mut rng);
    let dims = cfg.block_dims();
    for i in 0..cfg.layers {
        block::init_block(&mut store, &layer_prefix(i), &dims, &mut rng);
    }
    block::init_linear(&mut store, "out", cfg.attn_dim, cfg.speakers * cfg.fft_bins, &mut rng);
    Ok(store)
}

/// Differentiable forward pass. `features` is `[T, F]`; returns `C` mask
/// tensors of shape `[T, F]` and the per-layer trace.
pub fn forward(cfg: &ConformerConfig, p: &Bound, features: &Tensor) -> Result<(Vec<Tensor>, LayerTrace)> {
    match features.shape() {
        [_, f] if *f == cfg.fft_bins => {}
        s => return Err(dim_err!("separator input must be [T, {}], got {s:?}", cfg.fft_bins)),
    }
    let dims = cfg.block_dims();
    let mut z = block::linear(features, p, "in")?;
    let mut hidden = Vec::with_capacity(cfg.layers);
    for i in 0..cfg.layers {
        z = conformer_block(&z, p, &layer_prefix(i), &dims)?;
        hidden.push(z.clone());
    }
    let all = block::linear(&z, p, "out")?.sigmoid();
    let masks = (0..cfg.speakers)
        .map(|c| all.narrow(1, c * cfg.fft_bins, cfg.fft_bins))
        .collect::<Result<Vec<_>>>()?;
    Ok((masks, LayerTrace { hidden }))
}

fn check_layout(cfg: &ConformerConfig, params: &ParamStore) -> Result<()> {
    let expected = init_params(cfg, 0)?;
    if !expected.same_layout(params) {
        return Err(cfg_err!("parameters do not match the separator configuration"));
    }
    Ok(())
}

/// Gradient-free mask estimation on a normalized `[T, F]` feature matrix.
pub fn estimate_masks(feature: &Mat, cfg: &ConformerConfig, params: &ParamStore) -> Result<(Vec<Mask>, LayerTrace)> {
    check_layout(cfg, params)?;
    let bound = params.bind(false);
    let (masks, trace) = forward(cfg, &bound, &feature.to_tensor())?;
    let (t, f) = feature.shape();
    let masks = masks
        .iter()
        .map(|m| Mask::new(Mat::new(t, f, m.data().to_vec())?))
        .collect::<Result<Vec<_>>>()?;
    Ok((masks, trace))
}

/// A separator with its configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Separator {
    pub cfg: ConformerConfig,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    fingerprint: String,
    config: ConformerConfig,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Analysis front end shared by every separator entry point.
pub struct Frontend {
    pub stft: StftProcessor,
}

/// Spectrogram, magnitude and normalized input features of one waveform.
pub struct Analysis {
    pub spec: Spectrogram,
    pub magnitude: Mat,
    pub features: Mat,
}

impl Frontend {
    pub fn new() -> Self {
        Self { stft: StftProcessor::new(Default::default()).expect("default STFT config is valid") }
    }

    /// `audio` zero-padded so that whole frames cover every sample.
    pub fn pad_to_frames(&self, audio: &AudioBuffer) -> Result<AudioBuffer> {
        let cfg = self.stft.config();
        if cfg.span(cfg.num_frames(audio.len())) >= audio.len() {
            return Ok(audio.clone());
        }
        let frames = cfg.num_frames(audio.len().max(cfg.frame_length)) + usize::from(audio.len() >= cfg.frame_length);
        let mut x = audio.samples().to_vec();
        x.resize(cfg.span(frames), 0.0);
        AudioBuffer::new(x)
    }

    pub fn analyze(&self, audio: &AudioBuffer) -> Result<Analysis> {
        let spec = self.stft.stft(audio)?;
        let magnitude = spec.magnitude();
        let features = log_mvn(&magnitude);
        Ok(Analysis { spec, magnitude, features })
    }
}

impl Default for Frontend {
    fn default() -> Self {
        Self::new()
    }
}

impl Separator {
    pub fn new(cfg: ConformerConfig, seed: u64) -> Result<Self> {
        let params = init_params(&cfg, seed)?;
        Ok(Self { cfg, params })
    }

    pub fn from_parts(cfg: ConformerConfig, params: ParamStore) -> Result<Self> {
        check_layout(&cfg, &params)?;
        Ok(Self { cfg, params })
    }

    pub fn masks(&self, features: &Mat) -> Result<(Vec<Mask>, LayerTrace)> {
        estimate_masks(features, &self.cfg, &self.params)
    }

    /// Separates one waveform into `C` waveforms of the same length.
    /// The input is zero-padded to whole frames and the outputs trimmed back.
    pub fn separate(&self, frontend: &Frontend, audio: &AudioBuffer) -> Result<Vec<AudioBuffer>> {
        let input = frontend.pad_to_frames(audio)?;
        let a = frontend.analyze(&input)?;
        let (masks, _) = self.masks(&a.features)?;
        masks
            .iter()
            .map(|m| frontend.stft.istft(&apply_mask(&a.spec, m)?, audio.len()))
            .collect()
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        let header = Header {
            kind: "separator".into(),
            fingerprint: self.cfg.fingerprint(),
            config: self.cfg.clone(),
            meta,
        };
        Checkpoint::new(serde_json::to_string(&header).expect("header serializes"), self.params.clone())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let header: Header = serde_json::from_str(&ckpt.header)
            .map_err(|e| Error::Config(format!("checkpoint header is not a separator header: {e}")))?;
        if header.kind != "separator" {
            return Err(cfg_err!("checkpoint holds a `{}`, not a separator", header.kind));
        }
        if header.fingerprint != header.config.fingerprint() {
            return Err(cfg_err!("checkpoint config fingerprint mismatch"));
        }
        Self::from_parts(header.config, ckpt.params.clone())
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        self.to_checkpoint(meta).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
