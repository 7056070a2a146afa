//! Shared inputs for the kernel benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sepkit::dsp::AudioBuffer;

/// Uniform noise in [-0.5, 0.5), reproducible from `seed`.
pub fn noise(len: usize, seed: u64) -> AudioBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AudioBuffer::new((0..len).map(|_| rng.gen_range(-0.5..0.5)).collect()).expect("finite samples")
}

/// Row-normalized random log-probabilities, `t` frames by `v` symbols.
pub fn log_probs(t: usize, v: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(t * v);
    for _ in 0..t {
        let row: Vec<f64> = (0..v).map(|_| rng.gen_range(0.1..1.0)).collect();
        let z: f64 = row.iter().sum();
        out.extend(row.iter().map(|p| (p / z).ln()));
    }
    out
}
