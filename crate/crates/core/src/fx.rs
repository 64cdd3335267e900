//! Synthetic distortion recipe.
//!
//! A wet signal is `y = α·f(x) + (1 − α)·x`, where `f` is a gain-into-tanh
//! waveshaper followed by a hard clipper, each stage enabled by a flag.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::bail_validation;
use crate::{AudioClip, Result};

/// Default sampling range of the distortion gain γ, in dB.
pub const GAIN_DB_RANGE: (f64, f64) = (20.0, 50.0);
/// Default sampling range of the clipping threshold τ, in dB.
pub const THRESHOLD_DB_RANGE: (f64, f64) = (-50.0, -20.0);

/// Parameters of one rendered effect chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectChainConfig {
    pub distortion_gain_db: f64,
    pub clip_threshold_db: f64,
    pub mix_alpha: f64,
    pub apply_distortion: bool,
    pub apply_clipping: bool,
    pub seed: u64,
}

impl EffectChainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.distortion_gain_db.is_finite() || !self.clip_threshold_db.is_finite() {
            bail_validation!("effect gains must be finite");
        }
        if !(0.0..=1.0).contains(&self.mix_alpha) {
            bail_validation!("mix alpha {} outside [0, 1]", self.mix_alpha);
        }
        if !self.apply_distortion && !self.apply_clipping {
            bail_validation!("effect chain has neither distortion nor clipping enabled");
        }
        Ok(())
    }
}

fn db_to_linear(db: f64) -> f64 {
    libm::pow(10.0, db / 20.0)
}

fn map_clip(x: &AudioClip, f: impl Fn(f64) -> f64) -> Result<AudioClip> {
    let s: Vec<f32> = x.samples().iter().map(|&v| f(v as f64) as f32).collect();
    AudioClip::new(s, x.sample_rate())
}

/// `y[n] = tanh(x[n] · 10^(gain_db/20))`.
pub fn apply_distortion(x: &AudioClip, gain_db: f64) -> Result<AudioClip> {
    if !gain_db.is_finite() {
        bail_validation!("distortion gain must be finite, got {gain_db}");
    }
    let g = db_to_linear(gain_db);
    map_clip(x, |v| libm::tanh(v * g))
}

/// Symmetric hard clip at `10^(threshold_db/20)`.
pub fn apply_clipping(x: &AudioClip, threshold_db: f64) -> Result<AudioClip> {
    if !threshold_db.is_finite() {
        bail_validation!("clipping threshold must be finite, got {threshold_db}");
    }
    let t = db_to_linear(threshold_db) as f32;
    let s: Vec<f32> = x.samples().iter().map(|&v| v.clamp(-t, t)).collect();
    AudioClip::new(s, x.sample_rate())
}

/// `α·wet + (1 − α)·dry`.
pub fn mix(dry: &AudioClip, wet: &AudioClip, alpha: f64) -> Result<AudioClip> {
    if dry.len() != wet.len() || dry.sample_rate() != wet.sample_rate() {
        bail_validation!(
            "cannot mix {} samples @ {} Hz with {} samples @ {} Hz",
            dry.len(),
            dry.sample_rate(),
            wet.len(),
            wet.sample_rate()
        );
    }
    if !(0.0..=1.0).contains(&alpha) {
        bail_validation!("mix alpha {alpha} outside [0, 1]");
    }
    if alpha == 0.0 {
        return Ok(dry.clone());
    }
    if alpha == 1.0 {
        return Ok(wet.clone());
    }
    let s: Vec<f32> = dry
        .samples()
        .iter()
        .zip(wet.samples())
        .map(|(&d, &w)| (alpha * w as f64 + (1.0 - alpha) * d as f64) as f32)
        .collect();
    AudioClip::new(s, dry.sample_rate())
}

/// Renders `(dry, wet)`: distortion, then clipping, then the dry/wet mix.
pub fn render_pair(dry: &AudioClip, cfg: &EffectChainConfig) -> Result<(AudioClip, AudioClip)> {
    cfg.validate()?;
    let mut chain = dry.clone();
    if cfg.apply_distortion {
        chain = apply_distortion(&chain, cfg.distortion_gain_db)?;
    }
    if cfg.apply_clipping {
        chain = apply_clipping(&chain, cfg.clip_threshold_db)?;
    }
    let wet = mix(dry, &chain, cfg.mix_alpha)?;
    Ok((dry.clone(), wet))
}

/// Draws a fully wet chain: γ and τ uniform over their default ranges, each
/// stage enabled with probability 0.5 (redrawn until at least one is on).
pub fn sample_effect_config(seed: u64) -> EffectChainConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let distortion_gain_db = rng.gen_range(GAIN_DB_RANGE.0..=GAIN_DB_RANGE.1);
    let clip_threshold_db = rng.gen_range(THRESHOLD_DB_RANGE.0..=THRESHOLD_DB_RANGE.1);
    let (apply_distortion, apply_clipping) = loop {
        let flags = (rng.gen_bool(0.5), rng.gen_bool(0.5));
        if flags.0 || flags.1 {
            break flags;
        }
    };
    EffectChainConfig {
        distortion_gain_db,
        clip_threshold_db,
        mix_alpha: 1.0,
        apply_distortion,
        apply_clipping,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::SAMPLE_RATE;
    use alloc::vec;
    use proptest::prelude::*;

    fn clip(s: Vec<f32>) -> AudioClip {
        AudioClip::new(s, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn distortion_values() {
        let y = apply_distortion(&clip(vec![0.1, 0.0, 0.5]), 20.0).unwrap();
        assert!((y.samples()[0] as f64 - 0.761_594_155_955_764_9).abs() < 1e-6);
        assert_eq!(y.samples()[1], 0.0);
        let y = apply_distortion(&clip(vec![0.5]), 50.0).unwrap();
        assert!((y.samples()[0] as f64 - 1.0).abs() < 1e-6);
        assert!(apply_distortion(&clip(vec![0.5]), f64::NAN).is_err());
    }

    #[test]
    fn clipping_values() {
        let y = apply_clipping(&clip(vec![0.5, 0.05, -0.5]), -20.0).unwrap();
        assert_eq!(y.samples(), &[0.1, 0.05, -0.1]);
        assert!(apply_clipping(&clip(vec![0.5]), f64::INFINITY).is_err());
    }

    #[test]
    fn mix_boundaries_and_midpoint() {
        let d = clip(vec![0.2, -0.3]);
        let w = clip(vec![0.6, 0.9]);
        assert_eq!(mix(&d, &w, 0.0).unwrap(), d);
        assert_eq!(mix(&d, &w, 1.0).unwrap(), w);
        assert!((mix(&d, &w, 0.5).unwrap().samples()[0] - 0.4).abs() < 1e-7);
        assert!(mix(&d, &clip(vec![0.1]), 0.5).is_err());
    }

    #[test]
    fn render_pair_composes_stages_in_order() {
        let dry = clip((0..64).map(|i| ((i as f32) * 0.3).sin() * 0.8).collect());
        let mut cfg = EffectChainConfig {
            distortion_gain_db: 20.0,
            clip_threshold_db: -30.0,
            mix_alpha: 1.0,
            apply_distortion: true,
            apply_clipping: false,
            seed: 1,
        };
        let (d, w) = render_pair(&dry, &cfg).unwrap();
        assert_eq!(d, dry);
        assert_eq!(w, apply_distortion(&dry, 20.0).unwrap());
        cfg.apply_clipping = true;
        let (_, w) = render_pair(&dry, &cfg).unwrap();
        let expect = apply_clipping(&apply_distortion(&dry, 20.0).unwrap(), -30.0).unwrap();
        assert_eq!(w, expect);
        cfg.mix_alpha = 0.0;
        assert_eq!(render_pair(&dry, &cfg).unwrap().1, dry);
        cfg.apply_distortion = false;
        cfg.apply_clipping = false;
        assert!(render_pair(&dry, &cfg).is_err());
    }

    #[test]
    fn sampler_is_deterministic_and_never_dry() {
        assert_eq!(sample_effect_config(5), sample_effect_config(5));
        for s in 0..2000 {
            let c = sample_effect_config(s);
            assert!(c.apply_distortion || c.apply_clipping);
            assert!((20.0..=50.0).contains(&c.distortion_gain_db));
            assert!((-50.0..=-20.0).contains(&c.clip_threshold_db));
            assert_eq!(c.mix_alpha, 1.0);
        }
    }

    proptest! {
        #[test]
        fn effects_are_odd_and_bounded(
            x in proptest::collection::vec(-1.0f32..1.0, 1..64),
            gain in 20.0f64..50.0,
            thr in -50.0f64..-20.0,
        ) {
            let pos = clip(x.clone());
            let neg = clip(x.iter().map(|v| -v).collect());
            let dp = apply_distortion(&pos, gain).unwrap();
            let dn = apply_distortion(&neg, gain).unwrap();
            let cp = apply_clipping(&pos, thr).unwrap();
            let cn = apply_clipping(&neg, thr).unwrap();
            let t = db_to_linear(thr) as f32;
            for i in 0..x.len() {
                prop_assert_eq!(dp.samples()[i], -dn.samples()[i]);
                prop_assert_eq!(cp.samples()[i], -cn.samples()[i]);
                prop_assert!(dp.samples()[i].abs() <= 1.0);
                prop_assert!(cp.samples()[i].abs() <= t);
            }
            for i in 1..x.len() {
                if x[i - 1] <= x[i] {
                    prop_assert!(dp.samples()[i - 1] <= dp.samples()[i]);
                }
            }
        }
    }
}
