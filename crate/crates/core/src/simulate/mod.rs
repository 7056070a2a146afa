//! Reverberant, noisy one- and two-talker mixtures following the signal
//! model `y = sum_c s_c * h_c + n`, at desk scale.
//!
//! Every sample draws its randomness from its own ChaCha stream keyed by
//! `(seed, index)`, so generation order never changes the output.

mod meeting;
mod rir;
pub mod speech;

use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use meeting::{
    build_meeting_manifest, condition_tag, load_meeting, read_meeting_manifest, simulate_meeting, Meeting, MeetingConfig,
    MeetingEntry, Segment, SegmentEntry,
};
pub use rir::{convolve_truncated, image_rir, image_sources, ImageSource, RoomSpec, SPEED_OF_SOUND};
pub use speech::{synth_utterance, token_names, Prosody, Speaker};

use crate::dsp::{wav, AudioBuffer, SAMPLE_RATE};
use crate::error::{input_err, Error, Result};

/// Mixture taxonomy recorded per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixtureType {
    FullOverlap,
    PartialOverlap,
    Sequential,
    SingleSpeaker,
}

impl MixtureType {
    pub const ALL: [MixtureType; 4] =
        [Self::FullOverlap, Self::PartialOverlap, Self::Sequential, Self::SingleSpeaker];

    pub fn speakers(self) -> usize {
        if self == Self::SingleSpeaker {
            1
        } else {
            2
        }
    }
}

impl fmt::Display for MixtureType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::FullOverlap => "full_overlap",
            Self::PartialOverlap => "partial_overlap",
            Self::Sequential => "sequential",
            Self::SingleSpeaker => "single_speaker",
        };
        f.write_str(s)
    }
}

/// Ranges for the randomly drawn shoebox rooms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoomRanges {
    pub dims_min: [f64; 3],
    pub dims_max: [f64; 3],
    pub reflection: (f64, f64),
    pub max_order: u32,
    pub wall_margin: f64,
}

impl Default for RoomRanges {
    fn default() -> Self {
        Self {
            dims_min: [4.0, 4.0, 2.6],
            dims_max: [8.0, 7.0, 3.4],
            reflection: (0.2, 0.6),
            max_order: 3,
            wall_margin: 0.5,
        }
    }
}

impl RoomRanges {
    pub fn draw(&self, rng: &mut impl Rng) -> ([f64; 3], f64) {
        let dims = std::array::from_fn(|i| rng.gen_range(self.dims_min[i]..=self.dims_max[i]));
        (dims, rng.gen_range(self.reflection.0..=self.reflection.1))
    }

    pub fn point(&self, dims: [f64; 3], rng: &mut impl Rng) -> [f64; 3] {
        std::array::from_fn(|i| rng.gen_range(self.wall_margin..dims[i] - self.wall_margin))
    }
}

/// Simulation recipe. Room geometry ranges are desk defaults, not measured
/// values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub sdr_range: (f64, f64),
    pub snr_range_directional: (f64, f64),
    pub snr_range_isotropic: (f64, f64),
    pub add_noise: bool,
    /// Mixture types assigned round-robin by sample index.
    pub types: Vec<MixtureType>,
    pub tokens_per_utterance: (usize, usize),
    pub prosody: Prosody,
    pub room: RoomRanges,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            sdr_range: (-5.0, 5.0),
            snr_range_directional: (0.0, 20.0),
            snr_range_isotropic: (10.0, 20.0),
            add_noise: true,
            types: MixtureType::ALL.to_vec(),
            tokens_per_utterance: (3, 6),
            prosody: Prosody::default(),
            room: RoomRanges::default(),
        }
    }
}

/// Result of [`mix`]: `mixture == sum(images) + noise` sample for sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixed {
    pub mixture: AudioBuffer,
    pub images: Vec<AudioBuffer>,
    pub noise: AudioBuffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSample {
    pub id: String,
    pub mixture: AudioBuffer,
    pub images: Vec<AudioBuffer>,
    pub noise: AudioBuffer,
    /// Token-inventory indices per speaker, aligned with `images`.
    pub transcripts: Vec<Vec<usize>>,
    pub kind: MixtureType,
    pub sdr_db: Option<f64>,
    pub snr_db: Option<f64>,
}

impl MixtureSample {
    pub fn speaker_count(&self) -> usize {
        self.images.len()
    }
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Convolves each placed source with its RIR, scales the second image to the
/// requested SDR and the noise to the requested SNR, and sums.
///
/// Sources must already be positioned on the mixture timeline (all the same
/// length). `snr_db = f64::INFINITY` means noiseless.
pub fn mix(sources: &[AudioBuffer], rirs: &[AudioBuffer], noise: &AudioBuffer, sdr_db: f64, snr_db: f64) -> Result<Mixed> {
    if sources.is_empty() || sources.len() > 2 || rirs.len() != sources.len() {
        return Err(input_err!("need 1 or 2 sources with one RIR each, got {} and {}", sources.len(), rirs.len()));
    }
    let len = sources[0].len();
    if sources.iter().any(|s| s.len() != len) {
        return Err(input_err!("sources must share one timeline length"));
    }
    let mut images: Vec<Vec<f64>> = Vec::with_capacity(sources.len());
    for (i, (s, h)) in sources.iter().zip(rirs).enumerate() {
        if s.energy() == 0.0 {
            return Err(input_err!("source {i} is silent"));
        }
        let x = convolve_truncated(s.samples(), h.samples(), len);
        if energy(&x) == 0.0 {
            return Err(input_err!("image {i} is silent"));
        }
        images.push(x);
    }
    if images.len() == 2 {
        let ratio = energy(&images[0]) / energy(&images[1]);
        let g = (ratio / 10f64.powf(sdr_db / 10.0)).sqrt();
        images[1].iter_mut().for_each(|v| *v *= g);
    }
    let mut total = vec![0.0; len];
    for x in &images {
        for (t, v) in total.iter_mut().zip(x) {
            *t += v;
        }
    }
    let noise_scaled: Vec<f64> = if snr_db.is_infinite() && snr_db > 0.0 {
        vec![0.0; len]
    } else {
        if noise.len() < len {
            return Err(input_err!("noise has {} samples, mixture needs {len}", noise.len()));
        }
        let n = &noise.samples()[..len];
        let en = energy(n);
        if en == 0.0 {
            return Err(input_err!("noise is silent but a finite SNR was requested"));
        }
        let g = (energy(&total) / en / 10f64.powf(snr_db / 10.0)).sqrt();
        n.iter().map(|v| v * g).collect()
    };
    let mixture: Vec<f64> = total.iter().zip(&noise_scaled).map(|(a, b)| a + b).collect();
    Ok(Mixed {
        mixture: AudioBuffer::new(mixture)?,
        images: images.into_iter().map(AudioBuffer::new).collect::<Result<_>>()?,
        noise: AudioBuffer::new(noise_scaled)?,
    })
}

/// Per-sample random stream.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Colored noise: white Gaussian noise through a one-pole low-pass.
pub fn colored_noise(len: usize, pole: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut state = 0.0;
    (0..len)
        .map(|_| {
            let w: f64 = StandardNormal.sample(rng);
            state = pole * state + (1.0 - pole) * w;
            state
        })
        .collect()
}

/// Directional noise is a point source convolved with its own RIR; isotropic
/// noise is unconvolved. Both collapse into the single additive term.
fn draw_noise(cfg: &SimConfig, len: usize, dims: [f64; 3], reflection: f64, mic: [f64; 3], rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, f64)> {
    let directional = rng.gen_bool(0.5);
    let pole = rng.gen_range(0.3..0.95);
    let raw = colored_noise(len, pole, rng);
    if directional {
        let room = RoomSpec {
            dimensions: dims,
            source_pos: cfg.room.point(dims, rng),
            mic_pos: mic,
            reflection,
            max_order: cfg.room.max_order,
        };
        let h = image_rir(&room, SAMPLE_RATE)?;
        let snr = rng.gen_range(cfg.snr_range_directional.0..=cfg.snr_range_directional.1);
        Ok((convolve_truncated(&raw, h.samples(), len), snr))
    } else {
        let snr = rng.gen_range(cfg.snr_range_isotropic.0..=cfg.snr_range_isotropic.1);
        Ok((raw, snr))
    }
}

/// Draws sample `index` of the corpus identified by `seed`.
pub fn generate_sample(cfg: &SimConfig, seed: u64, index: u64) -> Result<MixtureSample> {
    if cfg.types.is_empty() {
        return Err(Error::Config("simulation config lists no mixture types".into()));
    }
    let kind = cfg.types[(index % cfg.types.len() as u64) as usize];
    let mut rng = sample_rng(seed, index);
    let c = kind.speakers();
    let mut utts = Vec::with_capacity(c);
    let mut transcripts = Vec::with_capacity(c);
    let pair = Speaker::pair(&mut rng);
    for &spk in &pair[..c] {
        let toks = speech::random_tokens(&mut rng, cfg.tokens_per_utterance);
        utts.push(synth_utterance(&spk, &toks, &cfg.prosody, &mut rng));
        transcripts.push(toks);
    }
    let offset = match kind {
        MixtureType::FullOverlap | MixtureType::SingleSpeaker => 0,
        MixtureType::PartialOverlap => (utts[0].len() as f64 * rng.gen_range(0.2..0.8)) as usize,
        MixtureType::Sequential => utts[0].len() + (rng.gen_range(0.0..0.2) * SAMPLE_RATE as f64) as usize,
    };
    let len = if c == 2 { utts[0].len().max(offset + utts[1].len()) } else { utts[0].len() };
    let mut sources = Vec::with_capacity(c);
    for (i, u) in utts.iter().enumerate() {
        let mut s = vec![0.0; len];
        let at = if i == 0 { 0 } else { offset };
        s[at..at + u.len()].copy_from_slice(u);
        sources.push(AudioBuffer::new(s)?);
    }
    let (dims, reflection) = cfg.room.draw(&mut rng);
    let mic = cfg.room.point(dims, &mut rng);
    let rirs = (0..c)
        .map(|_| {
            let room = RoomSpec {
                dimensions: dims,
                source_pos: cfg.room.point(dims, &mut rng),
                mic_pos: mic,
                reflection,
                max_order: cfg.room.max_order,
            };
            image_rir(&room, SAMPLE_RATE)
        })
        .collect::<Result<Vec<_>>>()?;
    let sdr = if c == 2 { rng.gen_range(cfg.sdr_range.0..=cfg.sdr_range.1) } else { 0.0 };
    let (noise, snr) = if cfg.add_noise {
        let (n, snr) = draw_noise(cfg, len, dims, reflection, mic, &mut rng)?;
        (AudioBuffer::new(n)?, snr)
    } else {
        (AudioBuffer::zeros(len), f64::INFINITY)
    };
    let mixed = mix(&sources, &rirs, &noise, sdr, snr)?;
    Ok(MixtureSample {
        id: format!("s{seed}-{index:06}"),
        mixture: mixed.mixture,
        images: mixed.images,
        noise: mixed.noise,
        transcripts,
        kind,
        sdr_db: (c == 2).then_some(sdr),
        snr_db: snr.is_finite().then_some(snr),
    })
}

/// One line of the JSONL corpus manifest. Paths are relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub mixture_path: String,
    pub image_paths: Vec<String>,
    pub transcript_tokens: Vec<Vec<String>>,
    #[serde(rename = "type")]
    pub kind: MixtureType,
    pub sdr_db: Option<f64>,
    pub snr_db: Option<f64>,
}

pub fn names_of(tokens: &[usize]) -> Vec<String> {
    let names = token_names();
    tokens.iter().map(|&t| names[t].to_string()).collect()
}

pub fn indices_of(names: &[String]) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| speech::token_index(n).ok_or_else(|| Error::Format(format!("unknown token `{n}`"))))
        .collect()
}

fn manifest_line(sample: &MixtureSample) -> ManifestEntry {
    ManifestEntry {
        id: sample.id.clone(),
        mixture_path: format!("wav/{}_mix.wav", sample.id),
        image_paths: (0..sample.images.len()).map(|i| format!("wav/{}_img{i}.wav", sample.id)).collect(),
        transcript_tokens: sample.transcripts.iter().map(|t| names_of(t)).collect(),
        kind: sample.kind,
        sdr_db: sample.sdr_db,
        snr_db: sample.snr_db,
    }
}

/// Generates `count` samples into `out_dir` (WAVs under `wav/`) and writes
/// `manifest.jsonl`. Returns the manifest path.
pub fn build_manifest(count: usize, seed: u64, cfg: &SimConfig, out_dir: &Path) -> Result<PathBuf> {
    if count == 0 {
        return Err(input_err!("count must be at least 1"));
    }
    std::fs::create_dir_all(out_dir.join("wav")).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("manifest.jsonl");
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for i in 0..count {
        let sample = generate_sample(cfg, seed, i as u64)?;
        let entry = manifest_line(&sample);
        wav::write_wav(&out_dir.join(&entry.mixture_path), &sample.mixture)?;
        for (p, img) in entry.image_paths.iter().zip(&sample.images) {
            wav::write_wav(&out_dir.join(p), img)?;
        }
        let line = serde_json::to_string(&entry).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    read_jsonl(path)
}

pub(crate) fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

/// Loads the audio behind a manifest entry.
pub fn load_entry(entry: &ManifestEntry, base: &Path) -> Result<MixtureSample> {
    let mixture = wav::read_wav(&base.join(&entry.mixture_path))?;
    let images = entry.image_paths.iter().map(|p| wav::read_wav(&base.join(p))).collect::<Result<Vec<_>>>()?;
    let transcripts = entry.transcript_tokens.iter().map(|t| indices_of(t)).collect::<Result<Vec<_>>>()?;
    let sum: Vec<f64> = (0..mixture.len())
        .map(|i| mixture.samples()[i] - images.iter().map(|x| x.samples()[i]).sum::<f64>())
        .collect();
    Ok(MixtureSample {
        id: entry.id.clone(),
        noise: AudioBuffer::new(sum)?,
        mixture,
        images,
        transcripts,
        kind: entry.kind,
        sdr_db: entry.sdr_db,
        snr_db: entry.snr_db,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn db(a: &[f64], b: &[f64]) -> f64 {
        10.0 * (energy(a) / energy(b)).log10()
    }

    fn tone(len: usize, f: f64, amp: f64) -> AudioBuffer {
        AudioBuffer::new((0..len).map(|n| amp * (f * n as f64).sin()).collect()).unwrap()
    }

    #[test]
    fn mix_hits_requested_levels_exactly() {
        let s = [tone(2000, 0.03, 0.5), tone(2000, 0.07, 0.2)];
        let h = [AudioBuffer::new(vec![1.0, 0.0, 0.3]).unwrap(), AudioBuffer::new(vec![0.5]).unwrap()];
        let noise = AudioBuffer::new(colored_noise(2000, 0.5, &mut sample_rng(1, 0))).unwrap();
        for (sdr, snr) in [(6.02, 10.0), (-5.0, 0.0), (3.3, 20.0)] {
            let m = mix(&s, &h, &noise, sdr, snr).unwrap();
            assert!((db(m.images[0].samples(), m.images[1].samples()) - sdr).abs() < 1e-6);
            let sum: Vec<f64> = (0..2000).map(|i| m.images[0].samples()[i] + m.images[1].samples()[i]).collect();
            assert!((db(&sum, m.noise.samples()) - snr).abs() < 1e-6);
            for i in 0..2000 {
                assert_eq!(m.mixture.samples()[i], sum[i] + m.noise.samples()[i]);
            }
        }
        let m = mix(&s, &h, &noise, 6.02, 10.0).unwrap();
        let ratio = energy(m.images[0].samples()) / energy(m.images[1].samples());
        assert!((ratio - 4.0).abs() < 1e-2 && (ratio - 10f64.powf(0.602)).abs() < 1e-6);
    }

    #[test]
    fn symmetric_and_noiseless_cases() {
        let a = tone(1000, 0.05, 0.3);
        let b = AudioBuffer::new(a.samples().iter().rev().cloned().collect()).unwrap();
        let h = [AudioBuffer::new(vec![1.0]).unwrap(), AudioBuffer::new(vec![1.0]).unwrap()];
        let m = mix(&[a.clone(), b.clone()], &h, &AudioBuffer::zeros(1000), 0.0, f64::INFINITY).unwrap();
        let ratio = energy(m.images[1].samples()) / energy(b.samples());
        assert!((ratio - 1.0).abs() < 1e-9);
        for i in 0..1000 {
            assert_eq!(m.mixture.samples()[i], m.images[0].samples()[i] + m.images[1].samples()[i]);
        }
        let silent = AudioBuffer::zeros(1000);
        assert!(matches!(mix(&[a, silent], &h, &AudioBuffer::zeros(1000), 0.0, f64::INFINITY), Err(Error::Input(_))));
    }

    #[test]
    fn samples_are_order_independent() {
        let cfg = SimConfig::default();
        let late = generate_sample(&cfg, 9, 5).unwrap();
        let _ = generate_sample(&cfg, 9, 2).unwrap();
        assert_eq!(generate_sample(&cfg, 9, 5).unwrap(), late);
        for i in 0..4 {
            let s = generate_sample(&cfg, 3, i).unwrap();
            assert_eq!(s.kind, MixtureType::ALL[i as usize]);
            assert_eq!(s.speaker_count(), s.kind.speakers());
            for n in 0..s.mixture.len() {
                let sum: f64 = s.images.iter().map(|x| x.samples()[n]).sum::<f64>() + s.noise.samples()[n];
                assert_eq!(s.mixture.samples()[n], sum);
            }
        }
    }
}
