//! Karplus-Strong plucked-string synthesis for synthetic dry guitar corpora.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{AudioClip, Result};

/// Lowest and highest fundamental of a standard-tuned guitar, in Hz.
pub const GUITAR_RANGE_HZ: (f64, f64) = (82.41, 1318.5);

/// One plucked note of `len` samples with fundamental `freq`.
///
/// `brightness` in `(0, 1]` low-passes the excitation burst; `decay` scales
/// the averaging feedback (closer to 1 rings longer).
pub fn pluck(freq: f64, len: usize, sample_rate: u32, brightness: f64, decay: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let period = (libm::round(sample_rate as f64 / freq) as usize).max(2);
    let mut out = vec![0.0; len];
    let mut prev = 0.0;
    for v in out.iter_mut().take(period) {
        let n: f64 = rng.gen_range(-1.0..1.0);
        prev += brightness * (n - prev);
        *v = prev;
    }
    let mean = out[..period.min(len)].iter().sum::<f64>() / period as f64;
    for v in out.iter_mut().take(period) {
        *v -= mean;
    }
    for n in period..len {
        let a = out[n - period];
        let b = if n > period { out[n - period - 1] } else { 0.0 };
        out[n] = decay * 0.5 * (a + b);
    }
    out
}

/// A monophonic phrase of random plucked notes (notes ring under later
/// ones), peak-normalized to `peak`.
pub fn guitar_phrase(seed: u64, len: usize, sample_rate: u32, peak: f64) -> Result<AudioClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mix = vec![0.0f64; len];
    let (lo, hi) = GUITAR_RANGE_HZ;
    let semitones = libm::floor(12.0 * libm::log2(hi / lo)) as i32;
    let mut start = 0usize;
    while start < len {
        let note = rng.gen_range(0..=semitones);
        let freq = lo * libm::pow(2.0, note as f64 / 12.0);
        let amp = rng.gen_range(0.3..1.0);
        let brightness = rng.gen_range(0.3..0.9);
        let decay = rng.gen_range(0.994..0.999);
        let ring = len - start;
        let tone = pluck(freq, ring, sample_rate, brightness, decay, &mut rng);
        for (m, t) in mix[start..].iter_mut().zip(&tone) {
            *m += amp * t;
        }
        let step_s = rng.gen_range(0.15..0.6);
        start += ((step_s * sample_rate as f64) as usize).max(1);
    }
    let max = mix.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let g = if max > 0.0 { peak / max } else { 0.0 };
    AudioClip::new(mix.iter().map(|v| (v * g) as f32).collect(), sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::SAMPLE_RATE;

    #[test]
    fn phrase_is_deterministic_bounded_and_nonsilent() {
        let a = guitar_phrase(3, 44_100, SAMPLE_RATE, 0.8).unwrap();
        assert_eq!(a, guitar_phrase(3, 44_100, SAMPLE_RATE, 0.8).unwrap());
        assert_ne!(a, guitar_phrase(4, 44_100, SAMPLE_RATE, 0.8).unwrap());
        let peak = a.samples().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!((peak - 0.8).abs() < 1e-6);
        let rms = (a.samples().iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / a.len() as f64).sqrt();
        assert!(rms > 0.02, "{rms}");
    }

    #[test]
    fn pluck_is_periodic_at_its_fundamental() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = pluck(441.0, 4000, SAMPLE_RATE, 0.5, 0.999, &mut rng);
        let corr = |lag: usize| (1000..3000).map(|n| x[n] * x[n - lag]).sum::<f64>();
        assert!(corr(100) > 0.5 * corr(0));
        assert!(corr(50) < corr(100));
    }
}
