//! Scoring: token error rate, scale-invariant SDR and per-condition reports.
//!
//! Recognition always runs on resynthesized waveforms, so the utterance-wise
//! and continuous paths decode exactly the same kind of input. A stream set
//! is scored under the transcript assignment with the fewest total errors;
//! rates are summed errors over summed reference lengths.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::asr::{asr_features, Asr};
use crate::css::{separate_continuous, ChunkPlan};
use crate::dsp::{apply_mask, AudioBuffer, Mask, Mat, MelTransform};
use crate::error::{input_err, Error, Result};
use crate::losses::Permutation;
use crate::separator::{fingerprint, Frontend, Separator};
use crate::simulate::{load_entry, load_meeting, read_manifest, read_meeting_manifest, MixtureSample};

/// Ceiling reported when the estimate matches the reference exactly; its
/// negative is reported for a silent estimate.
pub const SI_SDR_CAP_DB: f64 = 100.0;

/// Minimal number of substitutions, insertions and deletions turning `hyp`
/// into `reference`.
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(h != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

pub fn wer<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(input_err!("reference transcript is empty"));
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

pub fn si_sdr(est: &AudioBuffer, reference: &AudioBuffer) -> Result<f64> {
    si_sdr_slices(est.samples(), reference.samples())
}

pub fn si_sdr_slices(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(input_err!("SI-SDR needs equal lengths, got {} and {}", est.len(), reference.len()));
    }
    let rr: f64 = reference.iter().map(|r| r * r).sum();
    if rr == 0.0 {
        return Err(input_err!("SI-SDR reference is silent"));
    }
    let alpha = est.iter().zip(reference).map(|(e, r)| e * r).sum::<f64>() / rr;
    let target = alpha * alpha * rr;
    let resid: f64 = est.iter().zip(reference).map(|(e, r)| (e - alpha * r).powi(2)).sum();
    if target == 0.0 {
        return Ok(-SI_SDR_CAP_DB);
    }
    if resid == 0.0 {
        return Ok(SI_SDR_CAP_DB);
    }
    Ok((10.0 * (target / resid).log10()).clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}

/// Assignment of transcripts to streams (`streams >= transcripts`) with the
/// fewest total errors; returns the error count and `stream_of[transcript]`.
pub fn best_assignment(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> (usize, Vec<usize>) {
    let mut best = (usize::MAX, Vec::new());
    for p in Permutation::all(hyps.len()) {
        let e: usize = refs.iter().enumerate().map(|(j, r)| edit_distance(&hyps[p.0[j]], r)).sum();
        if e < best.0 {
            best = (e, p.0[..refs.len()].to_vec());
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub condition: String,
    pub utterances: usize,
    pub errors: usize,
    pub ref_tokens: usize,
    pub wer_percent: f64,
    /// Mean over scored (recording, speaker) pairs.
    pub si_sdr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub rows: Vec<ReportRow>,
    pub config_fingerprint: String,
    pub model_fingerprint: String,
}

#[derive(Default)]
struct Tally {
    utterances: usize,
    errors: usize,
    ref_tokens: usize,
    sdr_sum: f64,
    sdr_count: usize,
}

fn finish(mode: &str, tallies: BTreeMap<String, Tally>, config: String, model: String) -> EvalReport {
    let rows = tallies
        .into_iter()
        .map(|(condition, t)| ReportRow {
            condition,
            utterances: t.utterances,
            errors: t.errors,
            ref_tokens: t.ref_tokens,
            wer_percent: 100.0 * t.errors as f64 / t.ref_tokens.max(1) as f64,
            si_sdr_db: if t.sdr_count == 0 { f64::NAN } else { t.sdr_sum / t.sdr_count as f64 },
        })
        .collect();
    EvalReport { mode: mode.into(), rows, config_fingerprint: config, model_fingerprint: model }
}

impl EvalReport {
    /// Pooled rate across every row.
    pub fn overall_wer(&self) -> f64 {
        let e: usize = self.rows.iter().map(|r| r.errors).sum();
        let n: usize = self.rows.iter().map(|r| r.ref_tokens).sum();
        100.0 * e as f64 / n.max(1) as f64
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("mode: {}  config: {}  model: {}\n", self.mode, self.config_fingerprint, self.model_fingerprint);
        let _ = writeln!(s, "{:<18} {:>6} {:>7} {:>7} {:>8} {:>10}", "condition", "utts", "errors", "tokens", "WER%", "SI-SDR dB");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<18} {:>6} {:>7} {:>7} {:>8.2} {:>10.2}",
                r.condition, r.utterances, r.errors, r.ref_tokens, r.wer_percent, r.si_sdr_db
            );
        }
        let _ = writeln!(s, "{:<18} {:>6} {:>7} {:>7} {:>8.2}", "overall", "", "", "", self.overall_wer());
        s
    }

    /// Writes `<prefix>.json` and `<prefix>.txt`.
    pub fn write(&self, prefix: &Path) -> Result<()> {
        let json = prefix.with_extension("json");
        let txt = prefix.with_extension("txt");
        let body = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(&json, body).map_err(|e| Error::io(&json, e))?;
        std::fs::write(&txt, self.to_text()).map_err(|e| Error::io(&txt, e))
    }
}

/// Where utterance-wise evaluation takes its masks from.
#[derive(Clone, Copy)]
pub enum MaskSource<'a> {
    Model(&'a Separator),
    /// Ideal amplitude masks of the reference images, clamped to `[0, 1]`.
    Oracle,
    /// All-ones masks: both streams are the mixture.
    Unit,
}

impl MaskSource<'_> {
    fn fingerprint(&self) -> String {
        match self {
            MaskSource::Model(s) => s.cfg.fingerprint(),
            MaskSource::Oracle => "oracle".into(),
            MaskSource::Unit => "unit".into(),
        }
    }
}

/// Two output waveforms for one pre-cut mixture.
pub fn separate_sample(masks: MaskSource<'_>, frontend: &Frontend, sample: &MixtureSample) -> Result<Vec<AudioBuffer>> {
    match masks {
        MaskSource::Model(sep) => sep.separate(frontend, &sample.mixture),
        MaskSource::Oracle | MaskSource::Unit => {
            let spec = frontend.stft.stft(&frontend.pad_to_frames(&sample.mixture)?)?;
            let mag = spec.magnitude();
            (0..2)
                .map(|c| {
                    let m = match (masks, sample.images.get(c)) {
                        (MaskSource::Unit, _) => Mask::ones(mag.rows, mag.cols),
                        (_, Some(img)) => {
                            Mask::ideal_amplitude(&frontend.stft.stft(&frontend.pad_to_frames(img)?)?.magnitude(), &mag)?
                        }
                        (_, None) => Mask::new(Mat::zeros(mag.rows, mag.cols))?,
                    };
                    frontend.stft.istft(&apply_mask(&spec, &m)?, sample.mixture.len())
                })
                .collect()
        }
    }
}

/// Greedy transcript of a waveform.
pub fn decode_waveform(asr: &Asr, frontend: &Frontend, mel: &MelTransform, audio: &AudioBuffer) -> Result<Vec<usize>> {
    if audio.len() < frontend.stft.config().frame_length {
        return Ok(Vec::new());
    }
    let mag = frontend.stft.stft(audio)?.magnitude();
    asr.greedy_decode(&asr_features(&mag, mel)?)
}

fn best_sdr(streams: &[AudioBuffer], images: &[AudioBuffer]) -> Result<Vec<f64>> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for p in Permutation::all(streams.len()) {
        let v: Vec<f64> = images
            .iter()
            .enumerate()
            .map(|(j, img)| si_sdr(&streams[p.0[j]], img))
            .collect::<Result<_>>()?;
        let s: f64 = v.iter().sum();
        if best.as_ref().is_none_or(|b| s > b.0) {
            best = Some((s, v));
        }
    }
    Ok(best.map(|b| b.1).unwrap_or_default())
}

/// Separates and decodes every mixture of a manifest; rows are grouped by
/// mixture type.
pub fn evaluate_utterance_wise(manifest: &Path, masks: MaskSource<'_>, asr: &Asr, limit: Option<usize>) -> Result<EvalReport> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut entries = read_manifest(manifest)?;
    if let Some(n) = limit {
        entries.truncate(n);
    }
    let samples = entries.iter().map(|e| load_entry(e, base)).collect::<Result<Vec<_>>>()?;
    evaluate_samples(&samples, masks, asr)
}

pub fn evaluate_samples(samples: &[MixtureSample], masks: MaskSource<'_>, asr: &Asr) -> Result<EvalReport> {
    let frontend = Frontend::new();
    let mel = MelTransform::standard();
    let mut tallies: BTreeMap<String, Tally> = BTreeMap::new();
    let mut ids = String::new();
    for s in samples {
        ids.push_str(&s.id);
        let streams = separate_sample(masks, &frontend, s)?;
        let hyps = streams.iter().map(|w| decode_waveform(asr, &frontend, &mel, w)).collect::<Result<Vec<_>>>()?;
        let (errors, _) = best_assignment(&hyps, &s.transcripts);
        let t = tallies.entry(s.kind.to_string()).or_default();
        t.utterances += 1;
        t.errors += errors;
        t.ref_tokens += s.transcripts.iter().map(Vec::len).sum::<usize>();
        for v in best_sdr(&streams, &s.images)? {
            t.sdr_sum += v;
            t.sdr_count += 1;
        }
    }
    Ok(finish("utterance", tallies, fingerprint(&ids), masks.fingerprint()))
}

/// Continuous separation of each long recording, then every reference
/// segment is decoded from both streams and scored against the better one.
pub fn evaluate_continuous(manifest: &Path, sep: &Separator, asr: &Asr, plan: &ChunkPlan) -> Result<EvalReport> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let entries = read_meeting_manifest(manifest)?;
    if entries.is_empty() {
        return Err(input_err!("manifest {} lists no recordings", manifest.display()));
    }
    let frontend = Frontend::new();
    let mel = MelTransform::standard();
    let mut tallies: BTreeMap<String, Tally> = BTreeMap::new();
    let mut ids = String::new();
    for e in &entries {
        ids.push_str(&e.id);
        let m = load_meeting(e, base)?;
        let streams = separate_continuous(sep, &m.mixture, plan)?;
        let t = tallies.entry(e.condition.clone()).or_default();
        for seg in &m.segments {
            let end = seg.end.min(m.mixture.len());
            let hyps = streams
                .iter()
                .map(|s| decode_waveform(asr, &frontend, &mel, &AudioBuffer::new(s.samples()[seg.start..end].to_vec())?))
                .collect::<Result<Vec<_>>>()?;
            let errors = hyps.iter().map(|h| edit_distance(h, &seg.tokens)).min().unwrap_or(0);
            t.utterances += 1;
            t.errors += errors;
            t.ref_tokens += seg.tokens.len();
        }
        for v in best_sdr(&streams, &m.images)? {
            t.sdr_sum += v;
            t.sdr_count += 1;
        }
    }
    let cfg = fingerprint(&format!("{ids}{:?}", plan));
    Ok(finish("continuous", tallies, cfg, sep.cfg.fingerprint()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&["a", "b"], &["a", "b"]).unwrap(), 0.0);
        assert!((wer(&["a", "x", "c"], &["a", "b", "c"]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(wer(&["a", "b"], &["a", "b", "c", "d"]).unwrap(), 0.5);
        assert!(wer::<u8>(&[1], &[]).is_err());
        assert_eq!(edit_distance(&[1, 2, 3, 4, 5], &[9]), 5);
    }

    #[test]
    fn si_sdr_examples() {
        let r: Vec<f64> = (0..64).map(|i| (i as f64 * 0.3).sin()).collect();
        let rb = AudioBuffer::new(r.clone()).unwrap();
        assert_eq!(si_sdr(&rb, &rb).unwrap(), SI_SDR_CAP_DB);
        let twice = AudioBuffer::new(r.iter().map(|v| 2.0 * v).collect()).unwrap();
        assert_eq!(si_sdr(&twice, &rb).unwrap(), SI_SDR_CAP_DB);
        // an orthogonal component of equal energy
        let mut q: Vec<f64> = (0..64).map(|i| (i as f64 * 1.1).cos()).collect();
        let proj = q.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / r.iter().map(|v| v * v).sum::<f64>();
        q.iter_mut().zip(&r).for_each(|(a, b)| *a -= proj * b);
        let k = (r.iter().map(|v| v * v).sum::<f64>() / q.iter().map(|v| v * v).sum::<f64>()).sqrt();
        let est: Vec<f64> = r.iter().zip(&q).map(|(a, b)| a + k * b).collect();
        assert!(si_sdr_slices(&est, &r).unwrap().abs() < 1e-9);
        assert!(si_sdr_slices(&est, &[0.0; 64]).is_err());
        assert_eq!(si_sdr_slices(&[0.0; 64], &r).unwrap(), -SI_SDR_CAP_DB);
    }

    #[test]
    fn assignment_never_worse_than_fixed() {
        let hyps = vec![vec![3, 4], vec![1, 2, 2]];
        let refs = vec![vec![1, 2], vec![3, 4]];
        let (e, map) = best_assignment(&hyps, &refs);
        assert_eq!((e, map), (1, vec![1, 0]));
        let (e1, _) = best_assignment(&hyps, &refs[..1]);
        assert_eq!(e1, 1);
    }
}
