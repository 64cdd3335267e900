//! Slaney-style Mel filterbank.

use alloc::vec::Vec;

const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;

fn log_step() -> f64 {
    libm::log(6.4) / 27.0
}

/// Hz to Mel on the Slaney scale (linear below 1 kHz, logarithmic above).
pub fn hz_to_mel(hz: f64) -> f64 {
    if hz >= MIN_LOG_HZ {
        MIN_LOG_MEL + libm::log(hz / MIN_LOG_HZ) / log_step()
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    if mel >= MIN_LOG_MEL {
        MIN_LOG_HZ * libm::exp(log_step() * (mel - MIN_LOG_MEL))
    } else {
        F_SP * mel
    }
}

/// Triangular filters with Slaney area normalization.
///
/// Each filter stores only its non-zero span of FFT bins.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    n_bins: usize,
    edges_hz: Vec<f64>,
    filters: Vec<(usize, Vec<f64>)>,
}

impl MelFilterbank {
    pub fn new(sample_rate: f64, n_fft: usize, n_mels: usize, f_min: f64, f_max: f64) -> Self {
        let n_bins = n_fft / 2 + 1;
        let fft_freqs: Vec<f64> = (0..n_bins)
            .map(|k| k as f64 * sample_rate / n_fft as f64)
            .collect();
        let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
        let edges_hz: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let filters = (0..n_mels)
            .map(|m| {
                let (lo, c, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
                let enorm = 2.0 / (hi - lo);
                let w: Vec<f64> = fft_freqs
                    .iter()
                    .map(|&f| {
                        let lower = (f - lo) / (c - lo);
                        let upper = (hi - f) / (hi - c);
                        lower.min(upper).max(0.0) * enorm
                    })
                    .collect();
                let start = w.iter().position(|&v| v > 0.0).unwrap_or(0);
                let end = w.iter().rposition(|&v| v > 0.0).map_or(start, |e| e + 1);
                (start, w[start..end].to_vec())
            })
            .collect();
        Self {
            n_bins,
            edges_hz,
            filters,
        }
    }

    pub fn n_mels(&self) -> usize {
        self.filters.len()
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    /// Peak frequency of each triangle.
    pub fn center_frequencies(&self) -> Vec<f64> {
        self.edges_hz[1..self.edges_hz.len() - 1].to_vec()
    }

    /// Applies the filterbank to one magnitude frame.
    pub fn apply(&self, magnitudes: &[f64], out: &mut [f64]) {
        for (o, (start, w)) in out.iter_mut().zip(&self.filters) {
            *o = w
                .iter()
                .zip(&magnitudes[*start..*start + w.len()])
                .map(|(a, b)| a * b)
                .sum();
        }
    }

    /// Dense `n_mels x n_bins` matrix, row-major.
    pub fn dense(&self) -> Vec<f64> {
        let mut m = alloc::vec![0.0; self.n_mels() * self.n_bins];
        for (i, (start, w)) in self.filters.iter().enumerate() {
            m[i * self.n_bins + start..i * self.n_bins + start + w.len()].copy_from_slice(w);
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_is_invertible_and_piecewise() {
        for hz in [0.0, 440.0, 999.0, 1000.0, 4000.0, 22050.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
        assert!((hz_to_mel(1000.0) - 15.0).abs() < 1e-12);
        assert!((hz_to_mel(500.0) - 7.5).abs() < 1e-12);
    }

    #[test]
    fn filters_are_area_normalized_triangles() {
        let fb = MelFilterbank::new(44100.0, 2048, 128, 0.0, 22050.0);
        assert_eq!(fb.n_mels(), 128);
        let dense = fb.dense();
        let df = 44100.0 / 2048.0;
        // Filters spanning several bins integrate (in Hz) to ~1.
        for m in 0..128 {
            if fb.edges_hz[m + 2] - fb.edges_hz[m] < 8.0 * df {
                continue;
            }
            let row = &dense[m * fb.n_bins()..(m + 1) * fb.n_bins()];
            let area: f64 = row.iter().sum::<f64>() * df;
            assert!((area - 1.0).abs() < 0.05, "filter {m} area {area}");
        }
        let centers = fb.center_frequencies();
        assert!(centers.windows(2).all(|w| w[0] < w[1]));
    }
}
