//! Single-step trainers for the three training phases and early stopping.
//!
//! Data loading, logging and checkpoint files are handled by the caller.

use serde::{Deserialize, Serialize};

use crate::autograd::{Backend, Eager, Graph};
use crate::denoiser::Denoiser;
use crate::dsp::StftConfig;
use crate::error::bail_validation;
use crate::losses::{self, LossWeights, MelLoss};
use crate::nn::groups;
use crate::optim::{AdamW, AdamWConfig, ExponentialLr};
use crate::vocoder::{Discriminators, Generator};
use crate::{Error, Real, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Denoiser,
    Vocoder,
    Finetune,
}

/// Optimization and bookkeeping schedule shared by all phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub denoiser_steps: u64,
    pub vocoder_steps: u64,
    pub finetune_steps: u64,
    pub batch_size: usize,
    pub crop_seconds: f64,
    pub lr_denoiser: f64,
    pub lr_decay_denoiser: f64,
    pub betas_denoiser: (f64, f64),
    pub weight_decay_denoiser: f64,
    pub lr_vocoder: f64,
    /// Applied once per epoch.
    pub lr_decay_vocoder: f64,
    pub betas_vocoder: (f64, f64),
    pub weight_decay_vocoder: f64,
    pub adam_eps: f64,
    pub log_every: u64,
    pub validate_every: u64,
    pub checkpoint_every: u64,
    pub early_stopping: bool,
    pub early_stop_patience: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            denoiser_steps: 1_500_000,
            vocoder_steps: 1_000_000,
            finetune_steps: 500_000,
            batch_size: 64,
            crop_seconds: 1.0,
            lr_denoiser: 1e-5,
            lr_decay_denoiser: 0.999_999,
            betas_denoiser: (0.9, 0.999),
            weight_decay_denoiser: 0.01,
            lr_vocoder: 2e-4,
            lr_decay_vocoder: 0.999,
            betas_vocoder: (0.8, 0.99),
            weight_decay_vocoder: 0.01,
            adam_eps: 1e-8,
            log_every: 100,
            validate_every: 5000,
            checkpoint_every: 5000,
            early_stopping: true,
            early_stop_patience: 10,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.denoiser_steps == 0 || self.vocoder_steps == 0 || self.finetune_steps == 0 {
            bail_validation!("max_steps must be positive for every phase");
        }
        if self.batch_size == 0 || !(self.crop_seconds > 0.0) {
            bail_validation!("batch_size and crop_seconds must be positive");
        }
        if self.log_every == 0 || self.validate_every == 0 || self.checkpoint_every == 0 {
            bail_validation!("log, validation and checkpoint intervals must be positive");
        }
        self.denoiser_lr().validate()?;
        self.vocoder_lr().validate()?;
        self.denoiser_adam().validate()?;
        self.vocoder_adam().validate()
    }

    pub fn max_steps(&self, phase: Phase) -> u64 {
        match phase {
            Phase::Denoiser => self.denoiser_steps,
            Phase::Vocoder => self.vocoder_steps,
            Phase::Finetune => self.finetune_steps,
        }
    }

    pub fn denoiser_lr(&self) -> ExponentialLr {
        ExponentialLr {
            base: self.lr_denoiser,
            gamma: self.lr_decay_denoiser,
        }
    }

    pub fn vocoder_lr(&self) -> ExponentialLr {
        ExponentialLr {
            base: self.lr_vocoder,
            gamma: self.lr_decay_vocoder,
        }
    }

    pub fn denoiser_adam(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr_denoiser,
            betas: self.betas_denoiser,
            eps: self.adam_eps,
            weight_decay: self.weight_decay_denoiser,
        }
    }

    pub fn vocoder_adam(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr_vocoder,
            betas: self.betas_vocoder,
            eps: self.adam_eps,
            weight_decay: self.weight_decay_vocoder,
        }
    }
}

fn finite(step: u64, what: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Divergence { step, what, value })
    }
}

fn step_seed(seed: u64, step: u64) -> u64 {
    seed ^ step.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Denoiser phase: L1 between denoised wet Mel and dry Mel.
#[derive(Debug, Clone)]
pub struct DenoiserTrainer<T> {
    pub model: Denoiser<T>,
    pub optimizer: AdamW<T>,
    lr: ExponentialLr,
    step: u64,
    seed: u64,
}

impl<T: Real> DenoiserTrainer<T> {
    pub fn new(model: Denoiser<T>, schedule: &TrainSchedule, seed: u64) -> Result<Self> {
        let optimizer = AdamW::new(model.params(), schedule.denoiser_adam())?;
        Self::resume(model, optimizer, schedule, seed)
    }

    /// Continues from a restored optimizer; the step counter is its update count.
    pub fn resume(model: Denoiser<T>, optimizer: AdamW<T>, schedule: &TrainSchedule, seed: u64) -> Result<Self> {
        schedule.validate()?;
        Ok(Self {
            step: optimizer.steps(),
            lr: schedule.denoiser_lr(),
            model,
            optimizer,
            seed,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Learning rate of the next update.
    pub fn current_lr(&self) -> f64 {
        self.lr.at(self.step)
    }

    /// One optimizer update on `[batch, frames, bins]` wet and dry Mel.
    pub fn train_step(&mut self, wet: &Tensor<T>, dry: &Tensor<T>) -> Result<f64> {
        let lr = self.current_lr();
        let (loss, grads) = {
            let mut g = Graph::new(true, step_seed(self.seed, self.step));
            g.train_group(groups::DENOISER);
            let x = g.constant(wet.clone());
            let y = self.model.forward(&mut g, &x)?;
            let t = g.constant(dry.clone());
            let l = losses::l1(&mut g, &y, &t)?;
            let loss = finite(self.step, "l1_mel", g.value(&l).item().as_f64())?;
            (loss, g.backward(l)?.for_store(self.model.params()))
        };
        self.optimizer.step(self.model.params_mut(), &grads, lr)?;
        self.step += 1;
        Ok(loss)
    }

    /// Eval-mode L1 Mel loss.
    pub fn eval_loss(&self, wet: &Tensor<T>, dry: &Tensor<T>) -> Result<f64> {
        let mut e = Eager::new();
        let x = Backend::<T>::constant(&mut e, wet.clone());
        let y = self.model.forward(&mut e, &x)?;
        losses::l1_mel_loss(&y, dry)
    }
}

/// Loss values of one vocoder update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VocoderLosses {
    pub d_loss: f64,
    pub g_adv: f64,
    pub feature_matching: f64,
    pub mel_l1: f64,
    pub g_total: f64,
    /// Squared gradient norm reaching the frozen denoiser (fine-tuning only).
    pub denoiser_grad_sq_norm: f64,
}

/// Vocoder phase: alternating discriminator and generator updates.
#[derive(Debug, Clone)]
pub struct VocoderTrainer<T> {
    pub generator: Generator<T>,
    pub discriminators: Discriminators<T>,
    pub opt_g: AdamW<T>,
    pub opt_d: AdamW<T>,
    mel_loss: MelLoss<T>,
    weights: LossWeights,
    lr: ExponentialLr,
    step: u64,
    epoch: u64,
}

impl<T: Real> VocoderTrainer<T> {
    pub fn new(
        generator: Generator<T>,
        discriminators: Discriminators<T>,
        stft: &StftConfig,
        weights: &LossWeights,
        schedule: &TrainSchedule,
    ) -> Result<Self> {
        let opt_g = AdamW::new(generator.params(), schedule.vocoder_adam())?;
        let opt_d = AdamW::new(discriminators.params(), schedule.vocoder_adam())?;
        Self::resume(generator, discriminators, opt_g, opt_d, stft, weights, schedule, 0)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn resume(
        generator: Generator<T>,
        discriminators: Discriminators<T>,
        opt_g: AdamW<T>,
        opt_d: AdamW<T>,
        stft: &StftConfig,
        weights: &LossWeights,
        schedule: &TrainSchedule,
        epoch: u64,
    ) -> Result<Self> {
        schedule.validate()?;
        weights.validate()?;
        if stft.hop_length != generator.config().hop_length || stft.n_mels != generator.config().mel_bins {
            bail_validation!(
                "vocoder (hop {}, {} bins) does not match the STFT config (hop {}, {} bins)",
                generator.config().hop_length,
                generator.config().mel_bins,
                stft.hop_length,
                stft.n_mels
            );
        }
        Ok(Self {
            mel_loss: MelLoss::new(stft)?,
            weights: weights.clone(),
            lr: schedule.vocoder_lr(),
            step: opt_g.steps(),
            epoch,
            generator,
            discriminators,
            opt_g,
            opt_d,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Advances the per-epoch learning-rate decay.
    pub fn set_epoch(&mut self, epoch: u64) {
        self.epoch = epoch;
    }

    pub fn current_lr(&self) -> f64 {
        self.lr.at(self.epoch)
    }

    pub fn mel_loss(&self) -> &MelLoss<T> {
        &self.mel_loss
    }

    /// One discriminator update followed by one generator update.
    ///
    /// `mel` is the generator input `[B, F, bins]`; `wave` the target audio
    /// `[B, 1, (F - 1) * hop]` whose Mel is `target_mel`. With `frozen`, the
    /// input is first passed through that denoiser in eval mode.
    pub fn train_step(
        &mut self,
        mel: &Tensor<T>,
        wave: &Tensor<T>,
        target_mel: &Tensor<T>,
        frozen: Option<&Denoiser<T>>,
    ) -> Result<VocoderLosses> {
        let lr = self.current_lr();
        let step = self.step;
        let len = wave.shape().last().copied().unwrap_or(0);
        let hop = self.generator.config().hop_length;
        if wave.rank() != 3 || mel.rank() != 3 || len + hop != mel.dim(1) * hop {
            bail_validation!(
                "wave {:?} must be [batch, 1, (frames - 1) * hop] for Mel {:?}",
                wave.shape(),
                mel.shape()
            );
        }

        let mut g = Graph::new(false, 0);
        g.train_group(groups::GENERATOR);
        let mut x = g.constant(mel.clone());
        if let Some(d) = frozen {
            x = d.forward(&mut g, &x)?;
        }
        let y_full = self.generator.forward(&mut g, &x)?;
        let y_hat = g.narrow(&y_full, 2, 0, len)?;
        let fake_wave = g.value(&y_hat).clone();

        let (d_loss, grads_d) = {
            let mut gd = Graph::new(false, 0);
            gd.train_group(groups::DISCRIMINATORS);
            let real = gd.constant(wave.clone());
            let fake = gd.constant(fake_wave);
            let r = self.discriminators.forward(&mut gd, &real)?;
            let f = self.discriminators.forward(&mut gd, &fake)?;
            let l = losses::lsgan_discriminator(&mut gd, &r.scores, &f.scores)?;
            let v = finite(step, "d_loss", gd.value(&l).item().as_f64())?;
            (v, gd.backward(l)?.for_store(self.discriminators.params()))
        };
        self.opt_d.step(self.discriminators.params_mut(), &grads_d, lr)?;

        let real = g.constant(wave.clone());
        let r = self.discriminators.forward(&mut g, &real)?;
        let f = self.discriminators.forward(&mut g, &y_hat)?;
        let adv = losses::lsgan_generator(&mut g, &f.scores)?;
        let fm = losses::feature_matching(&mut g, &r.features, &f.features)?;
        let mel_hat = self.mel_loss.mel(&mut g, &y_hat)?;
        let target = g.constant(target_mel.clone());
        let mel_l1 = losses::l1(&mut g, &mel_hat, &target)?;
        let fm_w = g.scale(&fm, self.weights.lambda_fm)?;
        let mel_w = g.scale(&mel_l1, self.weights.lambda_mel)?;
        let total = g.add(&adv, &fm_w)?;
        let total = g.add(&total, &mel_w)?;
        let scalar = |g: &Graph<'_, T>, v| g.value(v).item().as_f64();
        let out = VocoderLosses {
            d_loss,
            g_adv: finite(step, "g_adv", scalar(&g, &adv))?,
            feature_matching: finite(step, "feature_matching", scalar(&g, &fm))?,
            mel_l1: finite(step, "mel_l1", scalar(&g, &mel_l1))?,
            g_total: finite(step, "g_total", scalar(&g, &total))?,
            denoiser_grad_sq_norm: 0.0,
        };
        let grads = g.backward(total)?;
        let out = VocoderLosses {
            denoiser_grad_sq_norm: grads.group_sq_norm(groups::DENOISER),
            ..out
        };
        let grads_g = grads.for_store(self.generator.params());
        drop(g);
        self.opt_g.step(self.generator.params_mut(), &grads_g, lr)?;
        self.step += 1;
        Ok(out)
    }

    /// Eval-mode Mel L1 between the synthesized and target audio.
    pub fn eval_mel_l1(&self, mel: &Tensor<T>, target_mel: &Tensor<T>, frozen: Option<&Denoiser<T>>) -> Result<f64> {
        let mut e = Eager::new();
        let mut x = Backend::<T>::constant(&mut e, mel.clone());
        if let Some(d) = frozen {
            x = d.forward(&mut e, &x)?;
        }
        let y = self.generator.forward(&mut e, &x)?;
        let len = (mel.dim(1) - 1) * self.generator.config().hop_length;
        let y = e.narrow(&y, 2, 0, len)?;
        let m = self.mel_loss.mel(&mut e, &y)?;
        losses::l1_mel_loss(&m, target_mel)
    }
}

/// Outcome of one validation for [`EarlyStopper`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    NoImprovement,
    Stop,
}

/// Stops after `patience` consecutive validations without improvement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopper {
    patience: usize,
    enabled: bool,
    best: Option<f64>,
    bad: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize, enabled: bool) -> Self {
        Self {
            patience,
            enabled,
            best: None,
            bad: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn observe(&mut self, val: f64) -> Verdict {
        if self.best.map_or(true, |b| val < b) {
            self.best = Some(val);
            self.bad = 0;
            return Verdict::Improved;
        }
        self.bad += 1;
        if self.enabled && self.bad >= self.patience {
            Verdict::Stop
        } else {
            Verdict::NoImprovement
        }
    }
}
