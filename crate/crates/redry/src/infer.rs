//! Two-stage restoration: Mel analysis, denoiser, vocoder.

use redry_core::denoiser::Denoiser;
use redry_core::dsp::{MelFrontend, StftConfig};
use redry_core::vocoder::Generator;
use redry_core::AudioClip;

use crate::checkpoint::PipelineCheckpoint;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Pipeline {
    frontend: MelFrontend,
    pub denoiser: Denoiser<f32>,
    pub generator: Generator<f32>,
}

impl Pipeline {
    pub fn new(stft: &StftConfig, denoiser: Denoiser<f32>, generator: Generator<f32>) -> Result<Self> {
        let ck = PipelineCheckpoint {
            stft: stft.clone(),
            denoiser,
            generator,
        };
        Self::from_checkpoint(ck)
    }

    pub fn from_checkpoint(ck: PipelineCheckpoint) -> Result<Self> {
        ck.check()?;
        Ok(Self {
            frontend: MelFrontend::new(&ck.stft)?,
            denoiser: ck.denoiser,
            generator: ck.generator,
        })
    }

    pub fn stft(&self) -> &StftConfig {
        self.frontend.config()
    }

    /// Restores `wet`. The vocoder emits `frames · hop` samples; unless
    /// `keep_full_length` is set the result is trimmed to the input length.
    pub fn restore(&self, wet: &AudioClip, keep_full_length: bool) -> Result<AudioClip> {
        let mel = self.frontend.compute(wet)?;
        let dry_mel = self.denoiser.denoise(&mel)?;
        let out = self.generator.synthesize(&dry_mel)?;
        if keep_full_length {
            Ok(out)
        } else {
            Ok(out.segment(0, wet.len())?)
        }
    }

    pub fn into_checkpoint(self) -> PipelineCheckpoint {
        PipelineCheckpoint {
            stft: self.frontend.config().clone(),
            denoiser: self.denoiser,
            generator: self.generator,
        }
    }
}
