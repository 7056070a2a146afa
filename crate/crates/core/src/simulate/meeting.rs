//! Long-form two-talker recordings for continuous separation.
//!
//! Speakers alternate turns. Each turn starts `overlap` of the previous turn's
//! length before that turn ends, so handovers overlap and there is no long
//! silence.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{colored_noise, convolve_truncated, image_rir, sample_rng, speech, RoomRanges, RoomSpec, Speaker};
use super::{synth_utterance, Prosody};
use crate::dsp::{AudioBuffer, SAMPLE_RATE};
use std::path::{Path, PathBuf};

use super::{indices_of, names_of, read_jsonl};
use crate::dsp::wav;
use crate::error::{input_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeetingConfig {
    pub duration_secs: f64,
    /// Fraction of each turn overlapped by the next one, in `[0, 0.45]`.
    pub overlap: f64,
    pub tokens_per_turn: (usize, usize),
    pub prosody: Prosody,
    pub room: RoomRanges,
    /// Level of talker 0 relative to talker 1, drawn per meeting.
    pub sdr_range: (f64, f64),
    /// `None` means noiseless.
    pub snr_db: Option<f64>,
}

impl Default for MeetingConfig {
    fn default() -> Self {
        Self {
            duration_secs: 10.0,
            overlap: 0.2,
            tokens_per_turn: (4, 7),
            prosody: Prosody::default(),
            room: RoomRanges::default(),
            sdr_range: (-5.0, 5.0),
            snr_db: Some(20.0),
        }
    }
}

/// One turn on the meeting timeline, in samples (source placement, before
/// reverberation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub speaker: usize,
    pub start: usize,
    pub end: usize,
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Meeting {
    pub mixture: AudioBuffer,
    /// Full-length reverberant image per speaker.
    pub images: [AudioBuffer; 2],
    pub segments: Vec<Segment>,
}

impl Meeting {
    /// Fraction of speech-active time during which both talkers speak.
    pub fn overlap_ratio(&self) -> f64 {
        let len = self.mixture.len();
        let mut count = vec![0u8; len];
        for seg in &self.segments {
            for c in &mut count[seg.start..seg.end.min(len)] {
                *c += 1;
            }
        }
        let active = count.iter().filter(|c| **c > 0).count();
        let both = count.iter().filter(|c| **c > 1).count();
        if active == 0 {
            0.0
        } else {
            both as f64 / active as f64
        }
    }
}

pub fn simulate_meeting(cfg: &MeetingConfig, seed: u64) -> Result<Meeting> {
    if !(0.0..=0.45).contains(&cfg.overlap) {
        return Err(input_err!("meeting overlap {} outside [0, 0.45]", cfg.overlap));
    }
    if !(cfg.duration_secs > 0.0) {
        return Err(input_err!("meeting duration must be positive"));
    }
    let mut rng = sample_rng(seed, u64::MAX);
    let speakers = Speaker::pair(&mut rng);
    let target = (cfg.duration_secs * SAMPLE_RATE as f64) as usize;
    let mut turns: Vec<(Segment, Vec<f64>)> = Vec::new();
    let mut next_start = 0usize;
    let mut last_end = [0usize; 2];
    let mut spk = 0usize;
    while next_start < target {
        let tokens = speech::random_tokens(&mut rng, cfg.tokens_per_turn);
        let audio = synth_utterance(&speakers[spk], &tokens, &cfg.prosody, &mut rng);
        let start = next_start.max(last_end[spk]);
        let end = start + audio.len();
        last_end[spk] = end;
        next_start = if cfg.overlap > 0.0 {
            end - (cfg.overlap * audio.len() as f64) as usize
        } else {
            end + (rng.gen_range(0.05..0.2) * SAMPLE_RATE as f64) as usize
        };
        turns.push((Segment { speaker: spk, start, end, tokens }, audio));
        spk = 1 - spk;
    }
    let len = turns.iter().map(|t| t.0.end).max().unwrap_or(0);
    let mut dry = [vec![0.0; len], vec![0.0; len]];
    for (seg, audio) in &turns {
        dry[seg.speaker][seg.start..seg.end].copy_from_slice(audio);
    }
    let (dims, reflection) = cfg.room.draw(&mut rng);
    let mic = cfg.room.point(dims, &mut rng);
    let mut images = Vec::with_capacity(2);
    for track in &dry {
        let room = RoomSpec {
            dimensions: dims,
            source_pos: cfg.room.point(dims, &mut rng),
            mic_pos: mic,
            reflection,
            max_order: cfg.room.max_order,
        };
        let h = image_rir(&room, SAMPLE_RATE)?;
        images.push(convolve_truncated(track, h.samples(), len));
    }
    let sdr = rng.gen_range(cfg.sdr_range.0..=cfg.sdr_range.1);
    let e: Vec<f64> = images.iter().map(|x| x.iter().map(|v| v * v).sum()).collect();
    if e[0] > 0.0 && e[1] > 0.0 {
        let g = (e[0] / e[1] / 10f64.powf(sdr / 10.0)).sqrt();
        images[1].iter_mut().for_each(|v| *v *= g);
    }
    let mut mixture: Vec<f64> = (0..len).map(|i| images[0][i] + images[1][i]).collect();
    if let Some(snr) = cfg.snr_db {
        let noise = colored_noise(len, 0.7, &mut rng);
        let es: f64 = mixture.iter().map(|v| v * v).sum();
        let en: f64 = noise.iter().map(|v| v * v).sum();
        let g = (es / en / 10f64.powf(snr / 10.0)).sqrt();
        mixture.iter_mut().zip(&noise).for_each(|(m, n)| *m += g * n);
    }
    let [a, b]: [Vec<f64>; 2] = images.try_into().expect("two images");
    Ok(Meeting {
        mixture: AudioBuffer::new(mixture)?,
        images: [AudioBuffer::new(a)?, AudioBuffer::new(b)?],
        segments: turns.into_iter().map(|t| t.0).collect(),
    })
}

/// One line of a long-form manifest. Segment tokens are inventory names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeetingEntry {
    pub id: String,
    pub mixture_path: String,
    pub image_paths: Vec<String>,
    pub segments: Vec<SegmentEntry>,
    /// Condition tag used to group report rows.
    pub condition: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentEntry {
    pub speaker: usize,
    pub start: usize,
    pub end: usize,
    pub tokens: Vec<String>,
}

pub fn condition_tag(overlap: f64) -> String {
    format!("overlap{:.2}", overlap)
}

/// Writes `count` meetings per overlap ratio into `out_dir` and returns the
/// path of `meetings.jsonl`.
pub fn build_meeting_manifest(count: usize, seed: u64, cfg: &MeetingConfig, overlaps: &[f64], out_dir: &Path) -> Result<PathBuf> {
    if count == 0 || overlaps.is_empty() {
        return Err(input_err!("need at least one meeting and one overlap ratio"));
    }
    std::fs::create_dir_all(out_dir.join("wav")).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("meetings.jsonl");
    let mut lines = String::new();
    for (k, &ov) in overlaps.iter().enumerate() {
        for i in 0..count {
            let m = simulate_meeting(&MeetingConfig { overlap: ov, ..cfg.clone() }, seed.wrapping_add((k * count + i) as u64))?;
            let id = format!("m{seed}-{k}-{i:04}");
            let entry = MeetingEntry {
                mixture_path: format!("wav/{id}_mix.wav"),
                image_paths: (0..2).map(|s| format!("wav/{id}_img{s}.wav")).collect(),
                segments: m
                    .segments
                    .iter()
                    .map(|g| SegmentEntry { speaker: g.speaker, start: g.start, end: g.end, tokens: names_of(&g.tokens) })
                    .collect(),
                condition: condition_tag(ov),
                id,
            };
            wav::write_wav(&out_dir.join(&entry.mixture_path), &m.mixture)?;
            for (p, img) in entry.image_paths.iter().zip(&m.images) {
                wav::write_wav(&out_dir.join(p), img)?;
            }
            lines.push_str(&serde_json::to_string(&entry).map_err(|e| Error::Format(e.to_string()))?);
            lines.push('\n');
        }
    }
    std::fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_meeting_manifest(path: &Path) -> Result<Vec<MeetingEntry>> {
    read_jsonl(path)
}

/// Loads the audio behind a long-form entry.
pub fn load_meeting(entry: &MeetingEntry, base: &Path) -> Result<Meeting> {
    let mixture = wav::read_wav(&base.join(&entry.mixture_path))?;
    if entry.image_paths.len() != 2 {
        return Err(Error::Format(format!("{} must list two images", entry.id)));
    }
    let a = wav::read_wav(&base.join(&entry.image_paths[0]))?;
    let b = wav::read_wav(&base.join(&entry.image_paths[1]))?;
    let segments = entry
        .segments
        .iter()
        .map(|g| Ok(Segment { speaker: g.speaker, start: g.start, end: g.end, tokens: indices_of(&g.tokens)? }))
        .collect::<Result<_>>()?;
    Ok(Meeting { mixture, images: [a, b], segments })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn turns_alternate_and_overlap() {
        let cfg = MeetingConfig { duration_secs: 6.0, overlap: 0.3, snr_db: None, ..Default::default() };
        let m = simulate_meeting(&cfg, 4).unwrap();
        assert!(m.mixture.len() >= 6 * 16000);
        for w in m.segments.windows(2) {
            assert_ne!(w[0].speaker, w[1].speaker);
            assert!(w[1].start < w[0].end);
        }
        let r = m.overlap_ratio();
        assert!(r > 0.05 && r < 0.6, "{r}");
        for i in 0..m.mixture.len() {
            assert_eq!(m.mixture.samples()[i], m.images[0].samples()[i] + m.images[1].samples()[i]);
        }
        assert_eq!(simulate_meeting(&cfg, 4).unwrap(), m);
    }

    #[test]
    fn zero_overlap_has_no_double_talk() {
        let cfg = MeetingConfig { duration_secs: 4.0, overlap: 0.0, ..Default::default() };
        let m = simulate_meeting(&cfg, 1).unwrap();
        assert_eq!(m.overlap_ratio(), 0.0);
        assert!(simulate_meeting(&MeetingConfig { overlap: 0.9, ..cfg }, 1).is_err());
    }

    #[test]
    fn meeting_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = MeetingConfig { duration_secs: 2.0, ..Default::default() };
        let path = build_meeting_manifest(1, 2, &cfg, &[0.0, 0.3], dir.path()).unwrap();
        let entries = read_meeting_manifest(&path).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[1].condition, "overlap0.30");
        let m = load_meeting(&entries[1], dir.path()).unwrap();
        let direct = simulate_meeting(&MeetingConfig { overlap: 0.3, ..cfg }, 3).unwrap();
        assert_eq!(m.segments, direct.segments);
        assert_eq!(m.mixture.len(), direct.mixture.len());
    }
}
