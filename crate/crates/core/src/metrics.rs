//! Objective metrics: ESR, SI-SDR, multi-resolution STFT distance and the
//! Fréchet distance between Gaussian fits of embedding sets.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dsp::{MagnitudeStft, MelFrontend, StftConfig};
use crate::error::bail_validation;
use crate::{AudioClip, Error, Result};

/// Bound applied to SI-SDR values, in dB.
pub const SI_SDR_CLAMP_DB: f64 = 100.0;

fn same_length(est: &AudioClip, reference: &AudioClip) -> Result<()> {
    if est.len() != reference.len() {
        bail_validation!("estimate has {} samples, reference {}", est.len(), reference.len());
    }
    if est.sample_rate() != reference.sample_rate() {
        bail_validation!("sample rates differ: {} vs {}", est.sample_rate(), reference.sample_rate());
    }
    Ok(())
}

/// Error-to-signal ratio `Σ(x − x̂)² / Σx²` without pre-emphasis.
pub fn esr(estimate: &AudioClip, reference: &AudioClip) -> Result<f64> {
    same_length(estimate, reference)?;
    let (mut err, mut energy) = (0.0, 0.0);
    for (&e, &r) in estimate.samples().iter().zip(reference.samples()) {
        let (e, r) = (e as f64, r as f64);
        err += (r - e) * (r - e);
        energy += r * r;
    }
    if energy == 0.0 {
        bail_validation!("ESR reference is all zeros");
    }
    Ok(err / energy)
}

/// Scale-invariant SDR in dB, clamped to ±[`SI_SDR_CLAMP_DB`].
pub fn si_sdr(estimate: &AudioClip, reference: &AudioClip) -> Result<f64> {
    same_length(estimate, reference)?;
    let (mut dot, mut ref_energy, mut est_energy) = (0.0, 0.0, 0.0);
    for (&e, &r) in estimate.samples().iter().zip(reference.samples()) {
        let (e, r) = (e as f64, r as f64);
        dot += e * r;
        ref_energy += r * r;
        est_energy += e * e;
    }
    if ref_energy == 0.0 || est_energy == 0.0 {
        bail_validation!("SI-SDR needs non-zero estimate and reference");
    }
    let alpha = dot / ref_energy;
    let (mut target, mut noise) = (0.0, 0.0);
    for (&e, &r) in estimate.samples().iter().zip(reference.samples()) {
        let s = alpha * r as f64;
        let n = e as f64 - s;
        target += s * s;
        noise += n * n;
    }
    let db = if noise == 0.0 {
        SI_SDR_CLAMP_DB
    } else if target == 0.0 {
        -SI_SDR_CLAMP_DB
    } else {
        10.0 * libm::log10(target / noise)
    };
    Ok(db.clamp(-SI_SDR_CLAMP_DB, SI_SDR_CLAMP_DB))
}

/// Resolutions and magnitude floor of [`mr_stft`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MrStftConfig {
    /// `(n_fft, hop)` pairs; the Hann window spans `n_fft`.
    pub resolutions: Vec<(usize, usize)>,
    /// Floor applied to the squared magnitude before the square root.
    pub power_floor: f64,
}

impl Default for MrStftConfig {
    fn default() -> Self {
        Self {
            resolutions: vec![(512, 128), (1024, 256), (2048, 512)],
            power_floor: 1e-8,
        }
    }
}

/// Multi-resolution STFT distance: per resolution, spectral convergence
/// `‖|Y| − |X̂|‖_F / ‖|Y|‖_F` plus mean `|log|Y| − log|X̂||`; averaged over
/// resolutions.
pub fn mr_stft(estimate: &AudioClip, reference: &AudioClip) -> Result<f64> {
    mr_stft_with(estimate, reference, &MrStftConfig::default())
}

pub fn mr_stft_with(estimate: &AudioClip, reference: &AudioClip, cfg: &MrStftConfig) -> Result<f64> {
    same_length(estimate, reference)?;
    let largest = cfg.resolutions.iter().map(|r| r.0).max().unwrap_or(0);
    if cfg.resolutions.is_empty() || estimate.len() < largest {
        bail_validation!("MR-STFT needs at least {largest} samples, got {}", estimate.len());
    }
    let (x, y) = (estimate.samples_f64(), reference.samples_f64());
    let mut total = 0.0;
    for &(n_fft, hop) in &cfg.resolutions {
        let stft = MagnitudeStft::new(n_fft, hop)?;
        let (_, mx) = stft.magnitudes(&x)?;
        let (_, my) = stft.magnitudes(&y)?;
        let floor = |m: f64| libm::sqrt((m * m).max(cfg.power_floor));
        let (mut diff_sq, mut ref_sq, mut log_l1) = (0.0, 0.0, 0.0);
        for (&a, &b) in mx.iter().zip(&my) {
            let (a, b) = (floor(a), floor(b));
            diff_sq += (b - a) * (b - a);
            ref_sq += b * b;
            log_l1 += (libm::log(b) - libm::log(a)).abs();
        }
        total += libm::sqrt(diff_sq) / libm::sqrt(ref_sq) + log_l1 / mx.len() as f64;
    }
    Ok(total / cfg.resolutions.len() as f64)
}

/// Per-pair metric values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub esr: f64,
    pub si_sdr_db: f64,
    pub mr_stft: f64,
}

pub fn pair_metrics(estimate: &AudioClip, reference: &AudioClip) -> Result<PairMetrics> {
    Ok(PairMetrics {
        esr: esr(estimate, reference)?,
        si_sdr_db: si_sdr(estimate, reference)?,
        mr_stft: mr_stft(estimate, reference)?,
    })
}

/// `M × D` embedding matrix (row-major) tagged with the extractor id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    pub vectors: Vec<Vec<f64>>,
    pub model_id: String,
}

impl EmbeddingSet {
    pub fn new(vectors: Vec<Vec<f64>>, model_id: impl Into<String>) -> Result<Self> {
        let d = vectors.first().map_or(0, Vec::len);
        if d == 0 || vectors.iter().any(|v| v.len() != d) {
            bail_validation!("embeddings must be non-empty vectors of one dimension");
        }
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            bail_validation!("embeddings contain non-finite values");
        }
        Ok(Self {
            vectors,
            model_id: model_id.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Mean and unbiased covariance of an embedding set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    /// Requires `M ≥ D + 1` vectors.
    pub fn fit(set: &EmbeddingSet) -> Result<Self> {
        let (m, d) = (set.len(), set.dim());
        if m < d + 1 {
            bail_validation!("{m} embeddings of dimension {d}: need at least {}", d + 1);
        }
        let mut mean = DVector::zeros(d);
        for v in &set.vectors {
            mean += DVector::from_column_slice(v);
        }
        mean /= m as f64;
        let mut centered = DMatrix::zeros(m, d);
        for (i, v) in set.vectors.iter().enumerate() {
            for j in 0..d {
                centered[(i, j)] = v[j] - mean[j];
            }
        }
        let cov = centered.transpose() * &centered / (m - 1) as f64;
        Ok(Self { mean, cov })
    }
}

/// Diagonal jitter added to covariances that are numerically rank deficient.
pub const FRECHET_JITTER: f64 = 1e-6;

fn symmetric_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((a + a.transpose()) * 0.5);
    let s = eig.eigenvalues.map(|l| libm::sqrt(l.max(0.0)));
    &eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose()
}

fn conditioned(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = cov.nrows();
    let eig = SymmetricEigen::new((cov + cov.transpose()) * 0.5);
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if !max.is_finite() {
        return Err(Error::Numerical("covariance is not finite".into()));
    }
    let tol = 1e-12 * max.max(1.0);
    if min > tol {
        return Ok(cov.clone());
    }
    let jittered = cov + DMatrix::identity(n, n) * FRECHET_JITTER;
    if min + FRECHET_JITTER <= tol {
        return Err(Error::Numerical(alloc::format!(
            "covariance stays rank deficient after jitter (min eigenvalue {min:e})"
        )));
    }
    Ok(jittered)
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2(Σa Σb)^{1/2})`.
pub fn frechet_distance_stats(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() || a.cov.shape() != b.cov.shape() || a.cov.nrows() != a.mean.len() {
        bail_validation!("Gaussian statistics have mismatched dimensions");
    }
    let (ca, cb) = (conditioned(&a.cov)?, conditioned(&b.cov)?);
    let sa = symmetric_sqrt(&ca);
    let inner = &sa * &cb * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| libm::sqrt(l.max(0.0)))
        .sum();
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let d = mean_term + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

/// Fréchet distance between Gaussian fits of two embedding sets.
pub fn frechet_distance(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64> {
    if a.dim() != b.dim() {
        bail_validation!("embedding dimensions differ: {} vs {}", a.dim(), b.dim());
    }
    frechet_distance_stats(&GaussianStats::fit(a)?, &GaussianStats::fit(b)?)
}

/// Identifier of the built-in extractor.
pub const REFERENCE_EXTRACTOR_ID: &str = "redry-logmel-stats-v1";

/// Offline embedding: mean and standard deviation of every log-Mel band over
/// non-overlapping windows of `window_frames` frames (`D = 2 · n_mels`).
#[derive(Debug, Clone)]
pub struct ReferenceExtractor {
    frontend: MelFrontend,
    window_frames: usize,
}

impl ReferenceExtractor {
    pub fn new(stft: &StftConfig, window_frames: usize) -> Result<Self> {
        if window_frames < 2 {
            bail_validation!("embedding window needs at least 2 frames");
        }
        Ok(Self {
            frontend: MelFrontend::new(stft)?,
            window_frames,
        })
    }

    pub fn dim(&self) -> usize {
        2 * self.frontend.config().n_mels
    }

    /// One vector per full window; clips shorter than a window give one
    /// vector over all their frames.
    pub fn embed(&self, clip: &AudioClip) -> Result<Vec<Vec<f64>>> {
        let mel = self.frontend.compute(clip)?;
        let (frames, bins) = (mel.frames(), mel.n_mels());
        let windows = (frames / self.window_frames).max(1);
        let len = if frames < self.window_frames { frames } else { self.window_frames };
        let mut out = Vec::with_capacity(windows);
        for w in 0..windows {
            let mut v = vec![0.0; 2 * bins];
            for b in 0..bins {
                let vals = (0..len).map(|f| mel.frame(w * len + f)[b] as f64);
                let mean = vals.clone().sum::<f64>() / len as f64;
                let var = vals.map(|x| (x - mean) * (x - mean)).sum::<f64>() / len as f64;
                v[b] = mean;
                v[bins + b] = libm::sqrt(var);
            }
            out.push(v);
        }
        Ok(out)
    }
}

impl Default for ReferenceExtractor {
    fn default() -> Self {
        Self::new(&StftConfig::default(), 43).expect("default extractor config is valid")
    }
}
