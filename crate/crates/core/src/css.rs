//! Continuous separation of long recordings: overlapping chunks, per-chunk
//! masking, stream alignment across chunk boundaries and cross-faded
//! stitching.
//!
//! Alignment picks the output order with the largest summed zero-lag
//! correlation against the previous chunk over their shared span. Stitching
//! cross-fades that span with complementary linear ramps.

use serde::{Deserialize, Serialize};

use crate::dsp::{AudioBuffer, SAMPLE_RATE};
use crate::error::{cfg_err, input_err, Result};
use crate::losses::Permutation;
use crate::separator::{Frontend, Separator};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChunkPlan {
    pub chunk_secs: f64,
    pub hop_secs: f64,
    /// Extra audio shown to the model before and after each chunk, then
    /// discarded.
    pub history_secs: f64,
    pub future_secs: f64,
}

impl Default for ChunkPlan {
    fn default() -> Self {
        Self { chunk_secs: 2.4, hop_secs: 0.8, history_secs: 0.0, future_secs: 0.0 }
    }
}

fn samples(secs: f64) -> usize {
    (secs * SAMPLE_RATE as f64).round() as usize
}

impl ChunkPlan {
    pub fn new(chunk_secs: f64, hop_secs: f64) -> Result<Self> {
        let p = Self { chunk_secs, hop_secs, ..Self::default() };
        p.validate()?;
        Ok(p)
    }

    /// One chunk long enough for any recording: no boundaries at all.
    pub fn single() -> Self {
        Self { chunk_secs: f64::INFINITY, hop_secs: f64::INFINITY, history_secs: 0.0, future_secs: 0.0 }
    }

    pub fn is_single(&self) -> bool {
        self.chunk_secs.is_infinite()
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_single() {
            return Ok(());
        }
        if !(self.hop_secs > 0.0 && self.hop_secs < self.chunk_secs && self.chunk_secs.is_finite()) {
            return Err(cfg_err!("chunk plan needs 0 < hop ({}) < chunk ({})", self.hop_secs, self.chunk_secs));
        }
        if !(self.history_secs >= 0.0 && self.future_secs >= 0.0) {
            return Err(cfg_err!("chunk contexts must be non-negative"));
        }
        if samples(self.hop_secs) == 0 {
            return Err(cfg_err!("hop is shorter than one sample"));
        }
        Ok(())
    }

    /// `(chunk, hop)` in samples for a recording of `len` samples.
    pub fn geometry(&self, len: usize) -> (usize, usize) {
        if self.is_single() {
            (len.max(1), len.max(1))
        } else {
            (samples(self.chunk_secs), samples(self.hop_secs))
        }
    }
}

/// A window of the recording and where it starts.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub offset: usize,
    pub audio: AudioBuffer,
}

fn window(x: &[f64], start: isize, len: usize) -> Vec<f64> {
    (0..len as isize)
        .map(|i| {
            let j = start + i;
            if j >= 0 && (j as usize) < x.len() { x[j as usize] } else { 0.0 }
        })
        .collect()
}

/// Splits `audio` into chunks starting at every multiple of the hop inside
/// the recording; the tail is zero-padded.
pub fn chunk(audio: &AudioBuffer, plan: &ChunkPlan) -> Result<Vec<Chunk>> {
    plan.validate()?;
    if audio.is_empty() {
        return Err(input_err!("cannot chunk an empty recording"));
    }
    let (len, hop) = plan.geometry(audio.len());
    (0..audio.len())
        .step_by(hop)
        .map(|offset| Ok(Chunk { offset, audio: AudioBuffer::new(window(audio.samples(), offset as isize, len))? }))
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Output order of `cur` that best continues `prev` on their shared span.
/// Both hold one slice per stream covering exactly that span.
pub fn align_streams(prev: &[&[f64]], cur: &[&[f64]]) -> Result<Permutation> {
    if prev.len() != cur.len() || prev.is_empty() {
        return Err(input_err!("alignment needs equal stream counts"));
    }
    if prev.iter().chain(cur).any(|s| s.len() != prev[0].len()) || prev[0].is_empty() {
        return Err(input_err!("alignment needs a shared non-empty span"));
    }
    let c = prev.len();
    let corr: Vec<Vec<f64>> = (0..c).map(|i| (0..c).map(|j| dot(prev[i], cur[j])).collect()).collect();
    if corr.iter().flatten().all(|&v| v == 0.0) {
        log::warn!("chunk overlap carries no energy, keeping stream order");
        return Ok(Permutation::identity(c));
    }
    let mut best = Permutation::identity(c);
    let mut best_score = (0..c).map(|i| corr[i][i]).sum::<f64>();
    for p in Permutation::all(c) {
        let s: f64 = (0..c).map(|i| corr[i][p.0[i]]).sum();
        if s > best_score {
            best_score = s;
            best = p;
        }
    }
    Ok(best)
}

/// Fade-in weight of the incoming chunk at position `i` of an `n`-sample
/// overlap; the outgoing chunk gets one minus it.
pub fn ramp(i: usize, n: usize) -> f64 {
    (i + 1) as f64 / (n + 1) as f64
}

/// Joins aligned chunk outputs (`outputs[k][stream]`, each chunk-long) into
/// one buffer per stream of `len` samples.
pub fn stitch(outputs: &[Vec<Vec<f64>>], offsets: &[usize], len: usize) -> Result<Vec<AudioBuffer>> {
    if outputs.is_empty() || outputs.len() != offsets.len() {
        return Err(input_err!("stitching needs one offset per chunk"));
    }
    let streams = outputs[0].len();
    let mut out = vec![vec![0.0; len]; streams];
    let mut end = 0usize;
    for (chunk, &off) in outputs.iter().zip(offsets) {
        let clen = chunk[0].len();
        let overlap = end.saturating_sub(off).min(clen);
        for (s, o) in out.iter_mut().enumerate() {
            for i in 0..clen {
                let t = off + i;
                if t >= len {
                    break;
                }
                o[t] = if i < overlap {
                    let r = ramp(i, overlap);
                    (1.0 - r) * o[t] + r * chunk[s][i]
                } else {
                    chunk[s][i]
                };
            }
        }
        end = end.max(off + clen);
    }
    out.into_iter().map(AudioBuffer::new).collect()
}

/// Chunk outputs before alignment, one vector per stream per chunk.
pub fn separate_chunks(sep: &Separator, frontend: &Frontend, audio: &AudioBuffer, plan: &ChunkPlan) -> Result<(Vec<usize>, Vec<Vec<Vec<f64>>>)> {
    let chunks = chunk(audio, plan)?;
    let (len, _) = plan.geometry(audio.len());
    let (hist, fut) = if plan.is_single() { (0, 0) } else { (samples(plan.history_secs), samples(plan.future_secs)) };
    let mut offsets = Vec::with_capacity(chunks.len());
    let mut outs = Vec::with_capacity(chunks.len());
    for c in &chunks {
        let ext = AudioBuffer::new(window(audio.samples(), c.offset as isize - hist as isize, hist + len + fut))?;
        let streams = sep.separate(frontend, &ext)?;
        outs.push(streams.into_iter().map(|s| s.samples()[hist..hist + len].to_vec()).collect());
        offsets.push(c.offset);
    }
    Ok((offsets, outs))
}

/// Puts every chunk's streams in the global order fixed by the first chunk.
pub fn align_all(outputs: &mut [Vec<Vec<f64>>], offsets: &[usize]) -> Result<Vec<Permutation>> {
    let mut perms = vec![Permutation::identity(outputs.first().map_or(0, Vec::len))];
    for k in 1..outputs.len() {
        let clen = outputs[k - 1][0].len();
        let shift = offsets[k] - offsets[k - 1];
        let n = clen.saturating_sub(shift).min(outputs[k][0].len());
        let p = if n == 0 {
            Permutation::identity(outputs[k].len())
        } else {
            let prev: Vec<&[f64]> = outputs[k - 1].iter().map(|s| &s[shift..shift + n]).collect();
            let cur: Vec<&[f64]> = outputs[k].iter().map(|s| &s[..n]).collect();
            align_streams(&prev, &cur)?
        };
        outputs[k] = p.apply(&outputs[k]);
        perms.push(p);
    }
    Ok(perms)
}

/// Separates a long recording into its output streams, each as long as the
/// input.
pub fn separate_continuous(sep: &Separator, audio: &AudioBuffer, plan: &ChunkPlan) -> Result<Vec<AudioBuffer>> {
    let frontend = Frontend::new();
    let (offsets, mut outs) = separate_chunks(sep, &frontend, audio, plan)?;
    align_all(&mut outs, &offsets)?;
    stitch(&outs, &offsets, audio.len())
}

/// Share of chunk boundaries at which aligned outputs keep every talker on
/// the same stream, judged against reference images on the shared span.
/// A talker counts at a boundary when its image there holds at least 5% of
/// the louder talker's energy; boundaries with no such talker are skipped.
/// Returns `(correct, scored)`.
pub fn boundary_accuracy(aligned: &[Vec<Vec<f64>>], offsets: &[usize], refs: &[&[f64]]) -> (usize, usize) {
    let (mut correct, mut scored) = (0, 0);
    for k in 1..aligned.len() {
        let (a, b) = (offsets[k - 1], offsets[k]);
        let n = (a + aligned[k - 1][0].len()).saturating_sub(b).min(aligned[k][0].len());
        let span: Vec<&[f64]> = refs.iter().map(|r| &r[b.min(r.len())..(b + n).min(r.len())]).collect();
        let energy: Vec<f64> = span.iter().map(|r| dot(r, r)).collect();
        let top = energy.iter().cloned().fold(0.0, f64::max);
        if n == 0 || top == 0.0 {
            continue;
        }
        let carrier = |chunk: &Vec<Vec<f64>>, start: usize, r: &[f64]| -> usize {
            let score = |s: &Vec<f64>| dot(&s[start..start + r.len()], r);
            (0..chunk.len()).fold(0, |best, i| if score(&chunk[i]) > score(&chunk[best]) { i } else { best })
        };
        let ok = span
            .iter()
            .zip(&energy)
            .filter(|(_, e)| **e >= 0.05 * top)
            .all(|(r, _)| carrier(&aligned[k - 1], b - a, r) == carrier(&aligned[k], 0, r));
        scored += 1;
        correct += usize::from(ok);
    }
    (correct, scored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::separator::ConformerConfig;

    fn buf(n: usize) -> AudioBuffer {
        AudioBuffer::new((0..n).map(|i| ((i as f64) * 0.01).sin()).collect()).unwrap()
    }

    #[test]
    fn chunk_offsets_follow_the_hop() {
        let plan = ChunkPlan::new(4.0, 2.0).unwrap();
        let c = chunk(&buf(10 * 16_000), &plan).unwrap();
        let offs: Vec<usize> = c.iter().map(|c| c.offset).collect();
        assert_eq!(offs, [0, 2, 4, 6, 8].map(|s| s * 16_000));
        assert!(c.iter().all(|c| c.audio.len() == 64_000));
        assert_eq!(c[4].audio.samples()[32_000..], vec![0.0; 32_000][..]);

        let short = chunk(&buf(100), &plan).unwrap();
        assert_eq!(short.len(), 1);
        assert_eq!(short[0].offset, 0);
        assert_eq!(&short[0].audio.samples()[..100], buf(100).samples());
        assert!(ChunkPlan::new(2.0, 2.0).is_err());
    }

    #[test]
    fn alignment_detects_swaps() {
        let a: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        let b: Vec<f64> = (0..50).map(|i| (i as f64 * 0.71).cos()).collect();
        assert!(align_streams(&[&a, &b], &[&a, &b]).unwrap().is_identity());
        assert_eq!(align_streams(&[&a, &b], &[&b, &a]).unwrap().0, vec![1, 0]);
        let z = vec![0.0; 50];
        assert!(align_streams(&[&z, &z], &[&a, &b]).unwrap().is_identity());
    }

    #[test]
    fn stitch_is_a_partition_of_unity() {
        let x: Vec<f64> = (0..300).map(|i| (i as f64 * 0.05).sin()).collect();
        let offsets = [0, 100, 200];
        let outs: Vec<Vec<Vec<f64>>> =
            offsets.iter().map(|&o| vec![window(&x, o as isize, 150), vec![0.0; 150]]).collect();
        let s = stitch(&outs, &offsets, 300).unwrap();
        for (u, v) in s[0].samples().iter().zip(&x) {
            assert!((u - v).abs() < 1e-12);
        }
        for n in [1, 7, 100] {
            for i in 0..n {
                assert_eq!(ramp(i, n) + (1.0 - ramp(i, n)), 1.0);
            }
        }
        let one = stitch(&[vec![vec![1.0; 10], vec![2.0; 10]]], &[0], 6).unwrap();
        assert_eq!(one[1].samples(), &[2.0; 6]);
    }

    #[test]
    fn continuous_output_shape_and_zero_input() {
        let sep = Separator::new(ConformerConfig::toy(1), 0).unwrap();
        let plan = ChunkPlan::new(0.5, 0.25).unwrap();
        let x = buf(13_000);
        let a = separate_continuous(&sep, &x, &plan).unwrap();
        let b = separate_continuous(&sep, &x, &plan).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.len() == 13_000));
        let z = separate_continuous(&sep, &AudioBuffer::zeros(9_000), &plan).unwrap();
        assert!(z.iter().all(|s| s.samples().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn swapping_model_outputs_swaps_streams() {
        let sep = Separator::new(ConformerConfig::toy(1), 5).unwrap();
        let plan = ChunkPlan::new(0.5, 0.25).unwrap();
        let x = buf(12_000);
        let (offs, mut outs) = separate_chunks(&sep, &Frontend::new(), &x, &plan).unwrap();
        let mut flipped: Vec<Vec<Vec<f64>>> = outs.iter().map(|c| vec![c[1].clone(), c[0].clone()]).collect();
        align_all(&mut outs, &offs).unwrap();
        align_all(&mut flipped, &offs).unwrap();
        let a = stitch(&outs, &offs, x.len()).unwrap();
        let b = stitch(&flipped, &offs, x.len()).unwrap();
        assert_eq!(a[0], b[1]);
        assert_eq!(a[1], b[0]);
    }
}
