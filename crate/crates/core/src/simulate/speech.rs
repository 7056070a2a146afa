//! Synthetic "speech-like" sources with known token transcripts.
//!
//! Each token is rendered either as a harmonic complex shaped by a formant
//! envelope (vowel-like units) or as band-limited noise (fricative-like
//! units). Speakers differ in fundamental frequency, a mild formant scale,
//! and level, so two talkers overlap in frequency much like real speech.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::SAMPLE_RATE;

enum Sound {
    Voiced(&'static [(f64, f64)]),
    Noise(f64, f64),
}

struct TokenDef {
    name: &'static str,
    sound: Sound,
}

const INVENTORY: [TokenDef; 8] = [
    TokenDef { name: "a", sound: Sound::Voiced(&[(750.0, 1.0), (1250.0, 0.6), (2600.0, 0.2)]) },
    TokenDef { name: "e", sound: Sound::Voiced(&[(450.0, 1.0), (2000.0, 0.7), (2800.0, 0.3)]) },
    TokenDef { name: "i", sound: Sound::Voiced(&[(280.0, 1.0), (2400.0, 0.6), (3200.0, 0.4)]) },
    TokenDef { name: "o", sound: Sound::Voiced(&[(500.0, 1.0), (850.0, 0.8), (2500.0, 0.1)]) },
    TokenDef { name: "u", sound: Sound::Voiced(&[(300.0, 1.0), (700.0, 0.5), (2300.0, 0.1)]) },
    TokenDef { name: "r", sound: Sound::Voiced(&[(480.0, 1.0), (1300.0, 0.9), (1650.0, 0.7)]) },
    TokenDef { name: "s", sound: Sound::Noise(4500.0, 7500.0) },
    TokenDef { name: "sh", sound: Sound::Noise(2000.0, 4000.0) },
];

/// Names of the synthetic token inventory, in index order.
pub fn token_names() -> Vec<&'static str> {
    INVENTORY.iter().map(|t| t.name).collect()
}

pub fn token_count() -> usize {
    INVENTORY.len()
}

pub fn token_index(name: &str) -> Option<usize> {
    INVENTORY.iter().position(|t| t.name == name)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Speaker {
    pub f0: f64,
    pub formant_scale: f64,
}

/// Pitch registers of the synthetic talkers, in Hz.
pub const LOW_REGISTER: (f64, f64) = (85.0, 145.0);
pub const HIGH_REGISTER: (f64, f64) = (175.0, 255.0);

impl Speaker {
    pub fn random(rng: &mut impl Rng) -> Self {
        let high = rng.gen_bool(0.5);
        Self::in_register(rng, high)
    }

    pub fn in_register(rng: &mut impl Rng, high: bool) -> Self {
        let (lo, hi) = if high { HIGH_REGISTER } else { LOW_REGISTER };
        let scale = if high { (1.0, 1.1) } else { (0.9, 1.0) };
        Self { f0: rng.gen_range(lo..hi), formant_scale: rng.gen_range(scale.0..scale.1) }
    }

    /// Two talkers from opposite registers, in random order.
    pub fn pair(rng: &mut impl Rng) -> [Self; 2] {
        let first_high = rng.gen_bool(0.5);
        [Self::in_register(rng, first_high), Self::in_register(rng, !first_high)]
    }
}

/// Timing knobs for rendered utterances, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prosody {
    pub token_dur: (f64, f64),
    pub gap: (f64, f64),
    pub edge_silence: (f64, f64),
    pub rms: f64,
}

impl Default for Prosody {
    fn default() -> Self {
        Self { token_dur: (0.10, 0.16), gap: (0.03, 0.07), edge_silence: (0.04, 0.08), rms: 0.05 }
    }
}

fn secs(rng: &mut impl Rng, range: (f64, f64)) -> usize {
    (rng.gen_range(range.0..=range.1) * SAMPLE_RATE as f64).round() as usize
}

fn render_token(def: &TokenDef, spk: &Speaker, len: usize, rng: &mut impl Rng, out: &mut Vec<f64>) {
    let fs = SAMPLE_RATE as f64;
    let ramp = (0.012 * fs) as usize;
    let env = |n: usize| -> f64 {
        let edge = n.min(len - 1 - n);
        if edge >= ramp {
            1.0
        } else {
            0.5 - 0.5 * (PI * edge as f64 / ramp as f64).cos()
        }
    };
    let start = out.len();
    match def.sound {
        Sound::Voiced(formants) => {
            let glide = rng.gen_range(-0.06..0.06);
            let harmonics = ((5000.0 / spk.f0) as usize).max(1);
            let amps: Vec<f64> = (1..=harmonics)
                .map(|h| {
                    let f = h as f64 * spk.f0;
                    formants
                        .iter()
                        .map(|&(fc, a)| {
                            let fc = fc * spk.formant_scale;
                            let bw = 80.0 + 0.06 * fc;
                            a * (-0.5 * ((f - fc) / bw).powi(2)).exp()
                        })
                        .sum::<f64>()
                        + 0.01
                })
                .collect();
            let mut phases: Vec<f64> = (0..harmonics).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
            for n in 0..len {
                let f0 = spk.f0 * (1.0 + glide * n as f64 / len as f64);
                let mut v = 0.0;
                for (h, (ph, a)) in phases.iter_mut().zip(&amps).enumerate() {
                    *ph += 2.0 * PI * (h + 1) as f64 * f0 / fs;
                    v += a * ph.sin();
                }
                out.push(v * env(n));
            }
        }
        Sound::Noise(lo, hi) => {
            let partials: Vec<(f64, f64)> =
                (0..40).map(|_| (rng.gen_range(lo..hi), rng.gen_range(0.0..2.0 * PI))).collect();
            for n in 0..len {
                let t = n as f64 / fs;
                let v: f64 = partials.iter().map(|(f, p)| (2.0 * PI * f * t + p).sin()).sum();
                out.push(0.35 * v * env(n));
            }
        }
    }
    debug_assert_eq!(out.len(), start + len);
}

/// Renders `tokens` (inventory indices) for `speaker`, normalized to the
/// prosody's RMS level.
pub fn synth_utterance(speaker: &Speaker, tokens: &[usize], prosody: &Prosody, rng: &mut impl Rng) -> Vec<f64> {
    let mut out = vec![0.0; secs(rng, prosody.edge_silence)];
    for (i, &tok) in tokens.iter().enumerate() {
        if i > 0 {
            let gap = secs(rng, prosody.gap);
            out.extend(std::iter::repeat_n(0.0, gap));
        }
        let len = secs(rng, prosody.token_dur).max(16);
        render_token(&INVENTORY[tok], speaker, len, rng, &mut out);
    }
    let tail = secs(rng, prosody.edge_silence);
    out.extend(std::iter::repeat_n(0.0, tail));
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64).sqrt();
    if rms > 0.0 {
        let g = prosody.rms / rms;
        out.iter_mut().for_each(|v| *v *= g);
    }
    out
}

pub fn random_tokens(rng: &mut impl Rng, range: (usize, usize)) -> Vec<usize> {
    let n = rng.gen_range(range.0..=range.1);
    (0..n).map(|_| rng.gen_range(0..token_count())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn deterministic_and_normalized() {
        let mut a = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut b = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let spk = Speaker { f0: 120.0, formant_scale: 1.0 };
        let x = synth_utterance(&spk, &[0, 6, 3], &Prosody::default(), &mut a);
        let y = synth_utterance(&spk, &[0, 6, 3], &Prosody::default(), &mut b);
        assert_eq!(x, y);
        let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
        assert!((rms - 0.05).abs() < 1e-12);
        assert!(x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn inventory_lookup() {
        assert_eq!(token_count(), 8);
        assert_eq!(token_index("sh"), Some(7));
        assert_eq!(token_names()[token_index("o").unwrap()], "o");
        assert_eq!(token_index("zz"), None);
    }
}
