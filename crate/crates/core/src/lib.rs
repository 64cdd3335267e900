//! Numeric core of the redry toolkit.
//!
//! Two-stage recovery of dry electric-guitar signals from distorted
//! recordings: a Transformer Mel denoiser maps the wet log-Mel spectrogram
//! to a dry one, and a GAN vocoder synthesizes the waveform from it.
//!
//! This crate is `no_std` (it needs `alloc`) and performs no IO. It holds:
//!
//! * [`audio`] and [`dsp`]: signal containers, FFT, STFT and the Slaney Mel frontend.
//! * [`fx`]: the synthetic distortion recipe used to build paired corpora.
//! * [`autograd`]: a small reverse-mode tensor engine used by the models.
//! * [`denoiser`], [`vocoder`]: the two model stages.
//! * [`losses`], [`optim`], [`train`]: objectives, AdamW and single-step trainers.
//! * [`metrics`]: ESR, SI-SDR, MR-STFT and Fréchet distance.
//!
//! File formats, the CLI and dataset handling live in the `redry` crate.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod audio;
pub mod autograd;
pub mod denoiser;
pub mod dsp;
mod error;
pub mod fx;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
mod real;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vocoder;

pub use audio::{AudioClip, MelSpec, SAMPLE_RATE};
pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
