//! Training objectives and a differentiable Mel frontend.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Backend, ConvSpec, Eager, Unary};
use crate::dsp::{MelFilterbank, StftConfig};
use crate::error::bail_validation;
use crate::nn::{ParamId, ParamStore};
use crate::{Real, Result, Tensor};

/// Weights of the vocoder generator objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_mel: f64,
    pub lambda_fm: f64,
    pub adversarial: AdversarialLoss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdversarialLoss {
    LeastSquares,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_mel: 45.0,
            lambda_fm: 2.0,
            adversarial: AdversarialLoss::LeastSquares,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_mel >= 0.0 && self.lambda_fm >= 0.0) {
            bail_validation!("loss weights must be non-negative");
        }
        Ok(())
    }
}

/// Mean absolute difference.
pub fn l1<'a, T: Real, B: Backend<'a, T>>(b: &mut B, pred: &B::V, target: &B::V) -> Result<B::V> {
    if b.shape(pred) != b.shape(target) {
        bail_validation!("L1 loss shape mismatch: {:?} vs {:?}", b.shape(pred), b.shape(target));
    }
    let d = b.sub(pred, target)?;
    let a = b.abs(&d)?;
    b.mean_all(&a)
}

fn mean_sq_offset<'a, T: Real, B: Backend<'a, T>>(b: &mut B, x: &B::V, offset: f64) -> Result<B::V> {
    let d = if offset == 0.0 { x.clone() } else { b.add_scalar(x, -offset)? };
    let s = b.square(&d)?;
    b.mean_all(&s)
}

fn sum_scalars<'a, T: Real, B: Backend<'a, T>>(b: &mut B, terms: Vec<B::V>) -> Result<B::V> {
    let mut it = terms.into_iter();
    let Some(mut acc) = it.next() else {
        return Ok(b.constant(Tensor::scalar(T::zero())));
    };
    for t in it {
        acc = b.add(&acc, &t)?;
    }
    Ok(acc)
}

/// Least-squares discriminator loss `Σ mean((r − 1)²) + mean(f²)`.
pub fn lsgan_discriminator<'a, T: Real, B: Backend<'a, T>>(
    b: &mut B,
    real: &[B::V],
    fake: &[B::V],
) -> Result<B::V> {
    if real.len() != fake.len() {
        bail_validation!("{} real vs {} fake score maps", real.len(), fake.len());
    }
    let mut terms = Vec::new();
    for (r, f) in real.iter().zip(fake) {
        terms.push(mean_sq_offset(b, r, 1.0)?);
        terms.push(mean_sq_offset(b, f, 0.0)?);
    }
    sum_scalars(b, terms)
}

/// Least-squares generator loss `Σ mean((f − 1)²)`.
pub fn lsgan_generator<'a, T: Real, B: Backend<'a, T>>(b: &mut B, fake: &[B::V]) -> Result<B::V> {
    let terms = fake.iter().map(|f| mean_sq_offset(b, f, 1.0)).collect::<Result<Vec<_>>>()?;
    sum_scalars(b, terms)
}

/// `Σ_layers mean|real − fake|` over every discriminator.
pub fn feature_matching<'a, T: Real, B: Backend<'a, T>>(
    b: &mut B,
    real: &[Vec<B::V>],
    fake: &[Vec<B::V>],
) -> Result<B::V> {
    if real.len() != fake.len() || real.iter().zip(fake).any(|(r, f)| r.len() != f.len()) {
        bail_validation!("feature map structure mismatch");
    }
    let mut terms = Vec::new();
    for (rs, fs) in real.iter().zip(fake) {
        for (r, f) in rs.iter().zip(fs) {
            terms.push(l1(b, r, f)?);
        }
    }
    sum_scalars(b, terms)
}

fn eager_scalar<T: Real>(v: crate::Result<alloc::borrow::Cow<'_, Tensor<T>>>) -> Result<f64> {
    Ok(v?.item().as_f64())
}

/// Mean absolute difference of two equally shaped Mel batches.
pub fn l1_mel_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let mut e = Eager::new();
    let (p, t) = (Backend::<T>::constant(&mut e, pred.clone()), Backend::<T>::constant(&mut e, target.clone()));
    eager_scalar(l1(&mut e, &p, &t))
}

/// `(d_loss, g_loss)` of the least-squares objective.
pub fn lsgan_losses<T: Real>(real: &[Tensor<T>], fake: &[Tensor<T>]) -> Result<(f64, f64)> {
    let mut e = Eager::new();
    let r: Vec<_> = real.iter().map(|t| Backend::<T>::constant(&mut e, t.clone())).collect();
    let f: Vec<_> = fake.iter().map(|t| Backend::<T>::constant(&mut e, t.clone())).collect();
    let d = eager_scalar(lsgan_discriminator(&mut e, &r, &f))?;
    let g = eager_scalar(lsgan_generator(&mut e, &f))?;
    Ok((d, g))
}

/// Feature matching loss of plain tensors.
pub fn feature_matching_loss<T: Real>(real: &[Vec<Tensor<T>>], fake: &[Vec<Tensor<T>>]) -> Result<f64> {
    let mut e = Eager::new();
    let mut lift = |xs: &[Vec<Tensor<T>>]| -> Vec<Vec<_>> {
        xs.iter()
            .map(|l| l.iter().map(|t| Backend::<T>::constant(&mut e, t.clone())).collect())
            .collect()
    };
    let (r, f) = (lift(real), lift(fake));
    eager_scalar(feature_matching(&mut e, &r, &f))
}

/// Differentiable log-Mel analysis of `[batch, 1, T]` audio, matching
/// [`crate::dsp::mel_transform`]: the windowed DFT is a strided convolution
/// with fixed cosine and sine kernels.
#[derive(Debug, Clone)]
pub struct MelLoss<T> {
    cfg: StftConfig,
    consts: ParamStore<T>,
    dft: ParamId,
    filters: ParamId,
    n_bins: usize,
}

/// Added under the square root so the magnitude stays differentiable at 0.
const MAG_EPS: f64 = 1e-12;

impl<T: Real> MelLoss<T> {
    pub fn new(cfg: &StftConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n_fft;
        let bins = cfg.n_bins();
        let window = cfg.padded_window();
        let dft = Tensor::from_fn(&[2 * bins, 1, n], |i| {
            let (row, j) = (i / n, i % n);
            let k = row % bins;
            let phase = core::f64::consts::TAU * ((k * j) % n) as f64 / n as f64;
            let v = if row < bins { libm::cos(phase) } else { -libm::sin(phase) };
            T::from_f64(v * window[j])
        });
        let fb = MelFilterbank::new(crate::SAMPLE_RATE as f64, n, cfg.n_mels, cfg.f_min, cfg.f_max);
        let filters = Tensor::new(&[cfg.n_mels, bins], fb.dense().into_iter().map(T::from_f64).collect())?;
        let mut consts = ParamStore::new(0);
        let dft = consts.add("dft", dft);
        let filters = consts.add("mel_filters", filters);
        Ok(Self {
            cfg: cfg.clone(),
            consts,
            dft,
            filters,
            n_bins: bins,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    /// `[batch, 1, T]` audio to `[batch, T / hop + 1, n_mels]` log-Mel.
    pub fn mel<'a, B: Backend<'a, T>>(&'a self, b: &mut B, wave: &B::V) -> Result<B::V> {
        let shape = b.shape(wave);
        if shape.len() != 3 || shape[1] != 1 || shape[2] < 2 {
            bail_validation!("Mel analysis expects [batch, 1, samples >= 2], got {:?}", shape);
        }
        let half = self.cfg.n_fft / 2;
        let x = b.pad_reflect(wave, half, half)?;
        let k = b.param(&self.consts, self.dft);
        let spec = b.conv1d(&x, &k, None, ConvSpec::same(0).with_stride(self.cfg.hop_length))?;
        let sq = b.square(&spec)?;
        let re = b.narrow(&sq, 1, 0, self.n_bins)?;
        let im = b.narrow(&sq, 1, self.n_bins, self.n_bins)?;
        let power = b.add(&re, &im)?;
        let power = b.add_scalar(&power, MAG_EPS)?;
        let mag = b.unary(&power, Unary::Sqrt)?;
        let mag = b.permute(&mag, &[0, 2, 1])?;
        let fb = b.param(&self.consts, self.filters);
        let mel = b.matmul(&mag, &fb, false, true)?;
        let mel = b.unary(&mel, Unary::ClampMin(self.cfg.log_floor))?;
        b.unary(&mel, Unary::Log)
    }
}
