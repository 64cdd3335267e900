use proptest::prelude::*;
use redry_core::denoiser::{Denoiser, DenoiserConfig};
use redry_core::dsp::{mel_transform, StftConfig};
use redry_core::fx::{render_pair, sample_effect_config};
use redry_core::synth::guitar_phrase;
use redry_core::vocoder::{Generator, VocoderConfig};
use redry_core::{AudioClip, MelSpec, SAMPLE_RATE};

fn noise(len: usize, seed: u64) -> AudioClip {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let s = (0..len)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 40) as f32 / (1u64 << 24) as f32) - 0.5
        })
        .collect();
    AudioClip::new(s, SAMPLE_RATE).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mel_frames_follow_floor_formula(len in 2048usize..40_000, seed in 0u64..100) {
        let cfg = StftConfig::default();
        let mel = mel_transform(&noise(len, seed), &cfg).unwrap();
        prop_assert_eq!(mel.frames(), len / 512 + 1);
        prop_assert_eq!(mel.n_mels(), 128);
        prop_assert!(mel.values().iter().all(|v| v.is_finite() && *v >= (1e-5f32).ln() - 1e-4));
    }

    #[test]
    fn denoiser_preserves_mel_shape(frames in 1usize..40, seed in 0u64..50) {
        let model = Denoiser::<f32>::new(&DenoiserConfig::with_size(1, 16), seed).unwrap();
        let values = (0..frames * 128).map(|i| ((i as f32 * 0.37 + seed as f32).sin() * 3.0) - 5.0).collect();
        let out = model.denoise(&MelSpec::new(values, frames, 128).unwrap()).unwrap();
        prop_assert_eq!((out.frames(), out.n_mels()), (frames, 128));
        prop_assert!(out.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rendered_pairs_respect_effect_bounds(seed in 0u64..10_000) {
        let cfg = sample_effect_config(seed);
        let dry = guitar_phrase(seed, 4096, SAMPLE_RATE, 0.9).unwrap();
        let (d, w) = render_pair(&dry, &cfg).unwrap();
        prop_assert_eq!(&d, &dry);
        prop_assert_eq!(w.len(), dry.len());
        let bound = if cfg.apply_clipping {
            10f64.powf(cfg.clip_threshold_db / 20.0)
        } else {
            1.0
        };
        prop_assert!(w.samples().iter().all(|&v| (v.abs() as f64) <= bound + 1e-7));
    }
}

#[test]
fn vocoder_length_is_hop_times_frames_for_small_frame_counts() {
    let g = Generator::<f32>::new(&VocoderConfig::toy(), 4).unwrap();
    let bins = g.config().mel_bins;
    for frames in 1usize..=24 {
        let mel = MelSpec::new(vec![-4.0; frames * bins], frames, bins).unwrap();
        assert_eq!(g.synthesize(&mel).unwrap().len(), g.config().hop_length * frames);
        assert_eq!(g.config().hop_length, 512);
    }
}

#[test]
fn four_second_clip_restores_to_345_hops() {
    let clip = guitar_phrase(1, 176_400, SAMPLE_RATE, 0.5).unwrap();
    let mel = mel_transform(&clip, &StftConfig::default()).unwrap();
    assert_eq!(mel.frames(), 345);
    let den = Denoiser::<f32>::new(&DenoiserConfig::tiny(), 2).unwrap();
    let g = Generator::<f32>::new(&VocoderConfig::toy(), 3).unwrap();
    let out = g.synthesize(&den.denoise(&mel).unwrap()).unwrap();
    assert_eq!(out.len(), 176_640);
    assert!(out.len() - clip.len() <= 512);
}
