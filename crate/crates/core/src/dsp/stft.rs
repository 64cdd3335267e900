use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{Fft, MelFilterbank};
use crate::error::bail_validation;
use crate::{AudioClip, MelSpec, Result, SAMPLE_RATE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowFn {
    Hann,
}

/// Mel analysis parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftConfig {
    pub n_fft: usize,
    pub window_size: usize,
    pub hop_length: usize,
    pub window_fn: WindowFn,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            n_fft: 2048,
            window_size: 2048,
            hop_length: 512,
            window_fn: WindowFn::Hann,
            n_mels: 128,
            f_min: 0.0,
            f_max: 22_050.0,
            log_floor: 1e-5,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.n_fft.is_power_of_two() {
            bail_validation!("n_fft {} must be a power of two", self.n_fft);
        }
        if self.hop_length == 0 || self.n_fft % self.hop_length != 0 {
            bail_validation!("hop_length {} must divide n_fft {}", self.hop_length, self.n_fft);
        }
        if self.window_size == 0 || self.window_size > self.n_fft {
            bail_validation!("window_size {} must be in 1..={}", self.window_size, self.n_fft);
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= SAMPLE_RATE as f64 / 2.0) {
            bail_validation!(
                "mel range {}..{} Hz must lie within 0..{}",
                self.f_min,
                self.f_max,
                SAMPLE_RATE / 2
            );
        }
        if self.n_mels == 0 {
            bail_validation!("n_mels must be positive");
        }
        if !(self.log_floor > 0.0) {
            bail_validation!("log_floor must be positive");
        }
        Ok(())
    }

    /// Frames produced by center-padded analysis of `len` samples.
    pub fn frames_for(&self, len: usize) -> usize {
        len / self.hop_length + 1
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Analysis window zero-padded (centered) to `n_fft`.
    pub fn padded_window(&self) -> Vec<f64> {
        let w = match self.window_fn {
            WindowFn::Hann => hann_window(self.window_size),
        };
        let mut out = vec![0.0; self.n_fft];
        let off = (self.n_fft - self.window_size) / 2;
        out[off..off + self.window_size].copy_from_slice(&w);
        out
    }
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * libm::cos(core::f64::consts::TAU * i as f64 / n as f64))
        .collect()
}

/// Center-padded (reflect) magnitude STFT.
#[derive(Debug, Clone)]
pub struct MagnitudeStft {
    fft: Fft,
    window: Vec<f64>,
    hop: usize,
}

impl MagnitudeStft {
    /// Hann window of length `n_fft`.
    pub fn new(n_fft: usize, hop: usize) -> Result<Self> {
        Self::with_window(n_fft, hop, hann_window(n_fft))
    }

    pub fn with_window(n_fft: usize, hop: usize, window: Vec<f64>) -> Result<Self> {
        if hop == 0 || window.len() != n_fft {
            bail_validation!("invalid STFT geometry: n_fft {}, hop {}", n_fft, hop);
        }
        Ok(Self {
            fft: Fft::new(n_fft)?,
            window,
            hop,
        })
    }

    pub fn n_bins(&self) -> usize {
        self.fft.len() / 2 + 1
    }

    /// Row-major `frames x bins` magnitudes. Requires `len > n_fft / 2`.
    pub fn magnitudes(&self, x: &[f64]) -> Result<(usize, Vec<f64>)> {
        let n = self.fft.len();
        let half = n / 2;
        if x.len() <= half {
            bail_validation!("signal of {} samples too short for reflect padding of {}", x.len(), half);
        }
        let frames = x.len() / self.hop + 1;
        let bins = self.n_bins();
        let mut out = vec![0.0; frames * bins];
        let mut frame = vec![0.0; n];
        let mut scratch = Vec::with_capacity(n);
        let mut mags = vec![0.0; n];
        let len = x.len() as isize;
        for f in 0..frames {
            let start = (f * self.hop) as isize - half as isize;
            for (j, v) in frame.iter_mut().enumerate() {
                let mut i = start + j as isize;
                if i < 0 {
                    i = -i;
                }
                if i >= len {
                    i = 2 * (len - 1) - i;
                }
                *v = x[i as usize] * self.window[j];
            }
            self.fft.real_magnitudes(&frame, &mut scratch, &mut mags);
            out[f * bins..(f + 1) * bins].copy_from_slice(&mags[..bins]);
        }
        Ok((frames, out))
    }

    /// Complex spectrum of one already-windowed frame (test helper surface).
    pub fn spectrum(&self, frame: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = frame.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fft.process(&mut buf);
        buf
    }
}

/// Reusable Mel analysis (STFT plan plus filterbank).
#[derive(Debug, Clone)]
pub struct MelFrontend {
    cfg: StftConfig,
    stft: MagnitudeStft,
    filterbank: MelFilterbank,
}

impl MelFrontend {
    pub fn new(cfg: &StftConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            stft: MagnitudeStft::with_window(cfg.n_fft, cfg.hop_length, cfg.padded_window())?,
            filterbank: MelFilterbank::new(SAMPLE_RATE as f64, cfg.n_fft, cfg.n_mels, cfg.f_min, cfg.f_max),
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn compute(&self, clip: &AudioClip) -> Result<MelSpec> {
        if clip.sample_rate() != SAMPLE_RATE {
            bail_validation!("mel analysis expects {} Hz audio, got {} Hz", SAMPLE_RATE, clip.sample_rate());
        }
        if clip.len() < self.cfg.window_size {
            bail_validation!(
                "clip of {} samples is shorter than one analysis window ({})",
                clip.len(),
                self.cfg.window_size
            );
        }
        let (frames, mags) = self.stft.magnitudes(&clip.samples_f64())?;
        let bins = self.stft.n_bins();
        let n_mels = self.cfg.n_mels;
        let mut mel = vec![0.0; n_mels];
        let mut values = Vec::with_capacity(frames * n_mels);
        for f in 0..frames {
            self.filterbank.apply(&mags[f * bins..(f + 1) * bins], &mut mel);
            values.extend(mel.iter().map(|&m| libm::log(m.max(self.cfg.log_floor)) as f32));
        }
        MelSpec::new(values, frames, n_mels)
    }
}

/// Log-Mel spectrogram of a 44.1 kHz clip.
pub fn mel_transform(clip: &AudioClip, cfg: &StftConfig) -> Result<MelSpec> {
    MelFrontend::new(cfg)?.compute(clip)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, len: usize, amp: f64) -> AudioClip {
        let s = (0..len)
            .map(|i| (amp * libm::sin(core::f64::consts::TAU * freq * i as f64 / 44100.0)) as f32)
            .collect();
        AudioClip::new(s, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn four_second_clip_has_345_frames() {
        let m = mel_transform(&AudioClip::silence(176_400, SAMPLE_RATE), &StftConfig::default()).unwrap();
        assert_eq!((m.frames(), m.n_mels()), (345, 128));
    }

    #[test]
    fn silence_maps_to_log_floor() {
        let m = mel_transform(&AudioClip::silence(4096, SAMPLE_RATE), &StftConfig::default()).unwrap();
        let floor = libm::log(1e-5) as f32;
        assert!(m.values().iter().all(|&v| v == floor));
    }

    #[test]
    fn short_clip_and_wrong_rate_are_rejected() {
        let cfg = StftConfig::default();
        assert!(mel_transform(&AudioClip::silence(2047, SAMPLE_RATE), &cfg).is_err());
        assert!(mel_transform(&AudioClip::silence(4096, 48_000), &cfg).is_err());
    }

    #[test]
    fn sine_peaks_at_nearest_filter_center() {
        let cfg = StftConfig::default();
        let front = MelFrontend::new(&cfg).unwrap();
        let centers = front.filterbank().center_frequencies();
        let expected = centers
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 440.0).abs().partial_cmp(&(b.1 - 440.0).abs()).unwrap())
            .unwrap()
            .0;
        let m = front.compute(&sine(440.0, 44_100, 0.5)).unwrap();
        for f in 4..m.frames() - 4 {
            let row = m.frame(f);
            let arg = (0..row.len()).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
            assert_eq!(arg, expected, "frame {f}");
        }
    }

    #[test]
    fn doubling_amplitude_adds_log_two_above_floor() {
        let cfg = StftConfig::default();
        let a = mel_transform(&sine(1000.0, 8192, 0.25), &cfg).unwrap();
        let b = mel_transform(&sine(1000.0, 8192, 0.5), &cfg).unwrap();
        let floor = libm::log(1e-5) as f32 + 1.0;
        let ln2 = core::f32::consts::LN_2;
        let mut checked = 0;
        for (x, y) in a.values().iter().zip(b.values()) {
            if *x > floor {
                assert!((y - x - ln2).abs() < 1e-4, "{x} -> {y}");
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn config_validation() {
        let mut cfg = StftConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.hop_length = 500;
        assert!(cfg.validate().is_err());
        let mut cfg = StftConfig::default();
        cfg.f_max = 30_000.0;
        assert!(cfg.validate().is_err());
    }
}
