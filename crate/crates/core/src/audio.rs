//! Signal containers shared by every stage.

use alloc::vec::Vec;

use crate::error::bail_validation;
use crate::{Real, Result, Tensor};

/// Canonical processing rate.
pub const SAMPLE_RATE: u32 = 44_100;

/// Mono waveform with amplitudes in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    /// Validates that every sample is finite and within `[-1, 1]`.
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            bail_validation!("sample rate must be positive");
        }
        if let Some((i, s)) = samples
            .iter()
            .enumerate()
            .find(|(_, s)| !s.is_finite() || s.abs() > 1.0)
        {
            bail_validation!("sample {} = {} is outside [-1, 1] or not finite", i, s);
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// Ingestion path: clamps to `[-1, 1]`, still rejecting non-finite input.
    pub fn clamped(mut samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.iter().any(|s| !s.is_finite()) {
            bail_validation!("audio contains non-finite samples");
        }
        for s in &mut samples {
            *s = s.clamp(-1.0, 1.0);
        }
        Self::new(samples, sample_rate)
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: alloc::vec![0.0; len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channel_count(&self) -> u16 {
        1
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Samples `start..start + len`.
    pub fn segment(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.samples.len() {
            bail_validation!(
                "segment {}..{} exceeds clip of {} samples",
                start,
                start + len,
                self.samples.len()
            );
        }
        Ok(Self {
            samples: self.samples[start..start + len].to_vec(),
            sample_rate: self.sample_rate,
        })
    }

    pub(crate) fn samples_f64(&self) -> Vec<f64> {
        self.samples.iter().map(|&s| s as f64).collect()
    }
}

/// Log-Mel spectrogram stored frame-major (`frames x n_mels`).
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpec {
    values: Vec<f32>,
    frames: usize,
    n_mels: usize,
}

impl MelSpec {
    pub fn new(values: Vec<f32>, frames: usize, n_mels: usize) -> Result<Self> {
        if values.len() != frames * n_mels {
            bail_validation!(
                "mel values hold {} entries, expected {} x {}",
                values.len(),
                frames,
                n_mels
            );
        }
        if values.iter().any(|v| !v.is_finite()) {
            bail_validation!("mel spectrogram contains non-finite values");
        }
        Ok(Self {
            values,
            frames,
            n_mels,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        &self.values[f * self.n_mels..(f + 1) * self.n_mels]
    }

    /// Frames `start..start + len`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames {
            bail_validation!("frame range {}..{} exceeds {}", start, start + len, self.frames);
        }
        Self::new(
            self.values[start * self.n_mels..(start + len) * self.n_mels].to_vec(),
            len,
            self.n_mels,
        )
    }

    /// `[frames, n_mels]` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.frames, self.n_mels], |i| T::from_f64(self.values[i] as f64))
    }

    /// Inverse of [`MelSpec::to_tensor`]; accepts `[frames, n_mels]` or `[1, frames, n_mels]`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        let (frames, n_mels) = match s {
            [f, m] | [1, f, m] => (*f, *m),
            _ => bail_validation!("cannot view tensor {:?} as a mel spectrogram", s),
        };
        Self::new(
            t.data().iter().map(|v| v.as_f64() as f32).collect(),
            frames,
            n_mels,
        )
    }
}

/// Stacks equally shaped spectrograms into `[B, frames, n_mels]`.
pub fn stack_mels<T: Real>(mels: &[&MelSpec]) -> Result<Tensor<T>> {
    let Some(first) = mels.first() else {
        bail_validation!("cannot stack an empty batch");
    };
    let (f, m) = (first.frames, first.n_mels);
    let mut data = Vec::with_capacity(mels.len() * f * m);
    for mel in mels {
        if mel.frames != f || mel.n_mels != m {
            bail_validation!("batch mixes mel shapes {}x{} and {}x{}", f, m, mel.frames, mel.n_mels);
        }
        data.extend(mel.values.iter().map(|&v| T::from_f64(v as f64)));
    }
    Tensor::new(&[mels.len(), f, m], data)
}

/// Stacks equal-length clips into `[B, 1, T]`.
pub fn stack_waves<T: Real>(clips: &[&AudioClip]) -> Result<Tensor<T>> {
    let Some(first) = clips.first() else {
        bail_validation!("cannot stack an empty batch");
    };
    let n = first.len();
    let mut data = Vec::with_capacity(clips.len() * n);
    for c in clips {
        if c.len() != n {
            bail_validation!("batch mixes clip lengths {} and {}", n, c.len());
        }
        data.extend(c.samples.iter().map(|&v| T::from_f64(v as f64)));
    }
    Tensor::new(&[clips.len(), 1, n], data)
}
