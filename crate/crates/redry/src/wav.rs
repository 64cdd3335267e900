//! WAV reading and writing with mono down-mixing and resampling.

use std::fs;
use std::path::Path;

use hound::{SampleFormat, WavSpec};
use redry_core::AudioClip;
use rubato::{FftFixedInOut, Resampler};

use crate::error::{Error, Result};

/// Reads a PCM (16/24/32-bit int) or 32-bit float WAV, averages its
/// channels and resamples to `target_rate`. Samples are clamped to `[-1, 1]`.
pub fn load_audio(path: &Path, target_rate: u32) -> Result<AudioClip> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.len() == 0 {
        return Err(Error::validation(format!("{} is empty", path.display())));
    }
    let (mono, rate) = read_mono(path)?;
    if mono.is_empty() {
        return Err(Error::validation(format!("{} contains no audio frames", path.display())));
    }
    let samples = if rate == target_rate {
        mono
    } else {
        resample(&mono, rate, target_rate).map_err(|e| Error::format(path, e))?
    };
    Ok(AudioClip::clamped(samples, target_rate)?)
}

fn read_mono(path: &Path) -> Result<(Vec<f32>, u32)> {
    let reader = hound::WavReader::open(path).map_err(|e| hound_err(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::format(path, "zero channels"));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader.into_samples::<f32>().collect::<Result<_, _>>(),
        (SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| (v as f64 * scale) as f32))
                .collect::<Result<_, _>>()
        }
        (fmt, bits) => return Err(Error::format(path, format!("unsupported sample format {fmt:?} with {bits} bits"))),
    }
    .map_err(|e| hound_err(path, e))?;
    let mono = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|f| (f.iter().map(|&v| v as f64).sum::<f64>() / channels as f64) as f32)
            .collect()
    };
    Ok((mono, spec.sample_rate))
}

fn hound_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(path, other),
    }
}

/// Band-limited FFT resampling; the output has `round(len · to / from)` samples.
pub fn resample(samples: &[f32], from: u32, to: u32) -> Result<Vec<f32>, String> {
    let target = ((samples.len() as u128 * to as u128 + from as u128 / 2) / from as u128) as usize;
    let min_in = from as usize / gcd(from as usize, to as usize);
    let blocks = 1024usize.div_ceil(min_in).next_multiple_of(2);
    let mut rs = FftFixedInOut::<f64>::new(from as usize, to as usize, blocks * min_in, 1).map_err(|e| e.to_string())?;
    let delay = rs.output_delay();
    let input: Vec<f64> = samples.iter().map(|&v| v as f64).collect();
    let mut out = Vec::with_capacity(target + delay + rs.output_frames_max());
    let mut pos = 0;
    while out.len() < target + delay {
        let need = rs.input_frames_next();
        let chunk = if pos + need <= input.len() {
            rs.process(&[&input[pos..pos + need]], None)
        } else {
            let rest = &input[pos.min(input.len())..];
            if rest.is_empty() {
                rs.process_partial::<&[f64]>(None, None)
            } else {
                rs.process_partial(Some(&[rest]), None)
            }
        }
        .map_err(|e| e.to_string())?;
        pos += need;
        out.extend_from_slice(&chunk[0]);
    }
    Ok(out[delay..delay + target].iter().map(|&v| v as f32).collect())
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Writes a 32-bit float mono WAV.
pub fn save_audio(clip: &AudioClip, path: &Path) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| hound_err(path, e))?;
    for &s in clip.samples() {
        w.write_sample(s).map_err(|e| hound_err(path, e))?;
    }
    w.finalize().map_err(|e| hound_err(path, e))
}

/// Sample rate, channel count and frame count from the header alone.
pub fn probe(path: &Path) -> Result<(u32, u16, u32)> {
    let r = hound::WavReader::open(path).map_err(|e| hound_err(path, e))?;
    let s = r.spec();
    Ok((s.sample_rate, s.channels, r.duration()))
}
