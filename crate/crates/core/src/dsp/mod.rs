//! STFT / Mel frontend.

mod fft;
mod mel;
mod stft;

pub use fft::Fft;
pub use mel::{hz_to_mel, mel_to_hz, MelFilterbank};
pub use stft::{hann_window, mel_transform, MagnitudeStft, MelFrontend, StftConfig, WindowFn};
