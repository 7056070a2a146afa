//! Shoebox room impulse responses by the image-source method.

use serde::{Deserialize, Serialize};

use crate::dsp::AudioBuffer;
use crate::error::{input_err, Result};

pub const SPEED_OF_SOUND: f64 = 343.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    /// Room extent in meters along x, y, z.
    pub dimensions: [f64; 3],
    pub source_pos: [f64; 3],
    pub mic_pos: [f64; 3],
    /// Pressure reflection coefficient shared by all six walls, in `[0, 1)`.
    pub reflection: f64,
    /// Highest total number of wall reflections traced.
    pub max_order: u32,
}

impl RoomSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.reflection) {
            return Err(input_err!("reflection coefficient {} outside [0, 1)", self.reflection));
        }
        for (name, p) in [("source", self.source_pos), ("microphone", self.mic_pos)] {
            for axis in 0..3 {
                if !(p[axis] > 0.0 && p[axis] < self.dimensions[axis]) {
                    return Err(input_err!(
                        "{name} position {p:?} is not strictly inside room {:?}",
                        self.dimensions
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn direct_distance(&self) -> f64 {
        dist(self.source_pos, self.mic_pos)
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

/// One image source: its position and how many walls it bounced off.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageSource {
    pub position: [f64; 3],
    pub order: u32,
}

/// Every image with total reflection order `<= max_order`.
///
/// Per axis, image coordinate `(1 - 2q) s + 2 n L` with `q in {0, 1}` and
/// integer `n` carries `|n - q| + |n|` reflections.
pub fn image_sources(room: &RoomSpec) -> Vec<ImageSource> {
    let max = room.max_order as i64;
    let mut per_axis: Vec<Vec<(f64, u32)>> = Vec::with_capacity(3);
    for axis in 0..3 {
        let (s, l) = (room.source_pos[axis], room.dimensions[axis]);
        let mut v = Vec::new();
        for n in -max..=max {
            for q in 0..=1i64 {
                let order = ((n - q).abs() + n.abs()) as u32;
                if order <= room.max_order {
                    v.push(((1 - 2 * q) as f64 * s + 2.0 * n as f64 * l, order));
                }
            }
        }
        per_axis.push(v);
    }
    let mut out = Vec::new();
    for &(x, ox) in &per_axis[0] {
        for &(y, oy) in &per_axis[1] {
            for &(z, oz) in &per_axis[2] {
                let order = ox + oy + oz;
                if order <= room.max_order {
                    out.push(ImageSource { position: [x, y, z], order });
                }
            }
        }
    }
    out
}

/// Impulse response with one tap per image at the nearest-sample delay,
/// amplitude `reflection^order / distance`. The response ends at its last
/// nonzero tap.
pub fn image_rir(room: &RoomSpec, fs: u32) -> Result<AudioBuffer> {
    room.validate()?;
    let mut taps: Vec<(usize, f64)> = Vec::new();
    for img in image_sources(room) {
        let amp = room.reflection.powi(img.order as i32);
        if amp == 0.0 {
            continue;
        }
        let d = dist(img.position, room.mic_pos);
        let delay = (d * fs as f64 / SPEED_OF_SOUND).round() as usize;
        taps.push((delay, amp / d));
    }
    let len = taps.iter().map(|t| t.0).max().map_or(1, |m| m + 1);
    let mut h = vec![0.0; len];
    for (delay, a) in taps {
        h[delay] += a;
    }
    AudioBuffer::new(h)
}

/// Full linear convolution truncated to `out_len`, skipping zero taps.
pub fn convolve_truncated(x: &[f64], h: &[f64], out_len: usize) -> Vec<f64> {
    let mut y = vec![0.0; out_len];
    for (k, &hk) in h.iter().enumerate() {
        if hk == 0.0 || k >= out_len {
            continue;
        }
        for (yi, xi) in y[k..].iter_mut().zip(x) {
            *yi += hk * xi;
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    fn room(reflection: f64, max_order: u32) -> RoomSpec {
        RoomSpec {
            dimensions: [5.0, 4.0, 3.0],
            source_pos: [1.0, 1.5, 1.2],
            mic_pos: [3.5, 2.0, 1.6],
            reflection,
            max_order,
        }
    }

    #[test]
    fn direct_path_only() {
        let r = room(0.6, 0);
        let h = image_rir(&r, 16000).unwrap();
        let d = r.direct_distance();
        let delay = (d * 16000.0 / 343.0).round() as usize;
        assert_eq!(h.len(), delay + 1);
        assert_eq!(h.samples()[delay], 1.0 / d);
        assert_eq!(h.samples().iter().filter(|v| **v != 0.0).count(), 1);
        assert_eq!(image_rir(&room(0.0, 3), 16000).unwrap(), h);
    }

    #[test]
    fn first_order_images_match_hand_list() {
        let r = room(0.5, 1);
        let (s, l) = (r.source_pos, r.dimensions);
        let mut expected = vec![s];
        for axis in 0..3 {
            let mut lo = s;
            lo[axis] = -s[axis];
            let mut hi = s;
            hi[axis] = 2.0 * l[axis] - s[axis];
            expected.push(lo);
            expected.push(hi);
        }
        let imgs = image_sources(&r);
        assert_eq!(imgs.len(), 7);
        for e in &expected {
            assert!(imgs.iter().any(|i| (0..3).all(|a| (i.position[a] - e[a]).abs() < 1e-12)), "{e:?}");
        }
        let h = image_rir(&r, 16000).unwrap();
        let mut want = vec![0.0; h.len()];
        for e in &expected {
            let d = dist(*e, r.mic_pos);
            let amp = if e == &s { 1.0 } else { 0.5 };
            want[(d * 16000.0 / 343.0).round() as usize] += amp / d;
        }
        assert_eq!(h.samples(), &want[..]);
    }

    #[test]
    fn outside_room_rejected() {
        let mut r = room(0.5, 1);
        r.mic_pos[2] = 3.0;
        assert!(matches!(image_rir(&r, 16000), Err(crate::Error::Input(_))));
    }

    #[test]
    fn energy_grows_with_reflection() {
        let mut prev = 0.0;
        for beta in [0.0, 0.2, 0.4, 0.6, 0.8] {
            let e = image_rir(&room(beta, 3), 16000).unwrap().energy();
            assert!(e >= prev);
            prev = e;
        }
    }

    #[test]
    fn convolution_truncates() {
        let y = convolve_truncated(&[1.0, 2.0, 3.0], &[0.0, 1.0, 0.5], 4);
        assert_eq!(y, vec![0.0, 1.0, 2.5, 4.0]);
    }
}
