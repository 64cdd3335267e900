//! AdamW with exponential learning-rate decay.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::bail_validation;
use crate::nn::ParamStore;
use crate::{Real, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            bail_validation!("invalid AdamW lr/betas: {} {:?}", self.lr, self.betas);
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            bail_validation!("AdamW eps must be positive and weight decay non-negative");
        }
        Ok(())
    }
}

/// `lr(k) = base · gamma^k`, with `k` counted in steps or epochs by the caller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentialLr {
    pub base: f64,
    pub gamma: f64,
}

impl ExponentialLr {
    pub fn validate(&self) -> Result<()> {
        if !(self.base > 0.0) || !(self.gamma > 0.0 && self.gamma <= 1.0) {
            bail_validation!("learning rate {} must be positive and decay {} in (0, 1]", self.base, self.gamma);
        }
        Ok(())
    }

    pub fn at(&self, k: u64) -> f64 {
        self.base * libm::pow(self.gamma, k as f64)
    }
}

/// AdamW with decoupled weight decay. Parameters without a gradient in a
/// step are left untouched, including their decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    cfg: AdamWConfig,
    step: u64,
    exp_avg: Vec<Tensor<T>>,
    exp_avg_sq: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamWConfig) -> Result<Self> {
        cfg.validate()?;
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Ok(Self {
            cfg,
            step: 0,
            exp_avg: zeros(),
            exp_avg_sq: zeros(),
        })
    }

    /// Restores saved moments, checking them against the store's shapes.
    pub fn from_state(
        store: &ParamStore<T>,
        cfg: AdamWConfig,
        step: u64,
        exp_avg: Vec<Tensor<T>>,
        exp_avg_sq: Vec<Tensor<T>>,
    ) -> Result<Self> {
        cfg.validate()?;
        if exp_avg.len() != store.len() || exp_avg_sq.len() != store.len() {
            bail_validation!("optimizer state has {} entries for {} parameters", exp_avg.len(), store.len());
        }
        for ((_, name, p), (m, v)) in store.iter().zip(exp_avg.iter().zip(&exp_avg_sq)) {
            if m.shape() != p.shape() || v.shape() != p.shape() {
                bail_validation!("optimizer state shape mismatch for {name}");
            }
        }
        Ok(Self {
            cfg,
            step,
            exp_avg,
            exp_avg_sq,
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn exp_avg(&self) -> &[Tensor<T>] {
        &self.exp_avg
    }

    pub fn exp_avg_sq(&self) -> &[Tensor<T>] {
        &self.exp_avg_sq
    }

    /// Applies one update at learning rate `lr`.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            bail_validation!("{} gradients for {} parameters", grads.len(), store.len());
        }
        self.step += 1;
        let (b1, b2) = self.cfg.betas;
        let t = self.step as f64;
        let c1 = 1.0 - libm::pow(b1, t);
        let c2 = 1.0 - libm::pow(b2, t);
        let decay = 1.0 - lr * self.cfg.weight_decay;
        let eps = self.cfg.eps;
        for (i, (p, g)) in store.tensors_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            p.expect_same_shape(g, "AdamW::step")?;
            let m = self.exp_avg[i].data_mut();
            let v = self.exp_avg_sq[i].data_mut();
            for (((w, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let gj = gj.as_f64();
                let mn = b1 * mj.as_f64() + (1.0 - b1) * gj;
                let vn = b2 * vj.as_f64() + (1.0 - b2) * gj * gj;
                *mj = T::from_f64(mn);
                *vj = T::from_f64(vn);
                let upd = (mn / c1) / (libm::sqrt(vn / c2) + eps);
                *w = T::from_f64(w.as_f64() * decay - lr * upd);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn learning_rate_follows_exponential_decay() {
        let s = ExponentialLr {
            base: 1e-5,
            gamma: 0.999999,
        };
        for k in [0u64, 1, 10, 12_345, 1_500_000] {
            let mut expect = 1e-5;
            if k <= 20_000 {
                for _ in 0..k {
                    expect *= 0.999999;
                }
            } else {
                expect = 1e-5 * libm::exp(k as f64 * libm::log(0.999999));
            }
            assert!((s.at(k) - expect).abs() <= 1e-12 * expect, "{k}");
        }
    }

    #[test]
    fn adamw_matches_hand_computed_steps() {
        let mut store = ParamStore::<f64>::new(1);
        store.add("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
        store.add("unused", Tensor::new(&[1], vec![3.0]).unwrap());
        let cfg = AdamWConfig {
            lr: 0.1,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
        };
        let mut opt = AdamW::new(&store, cfg).unwrap();
        let g = Tensor::new(&[2], vec![0.5, -0.25]).unwrap();
        opt.step(&mut store, &[Some(g.clone()), None], 0.1).unwrap();
        // First step: m̂ = g, v̂ = g², update = sign(g) (up to eps).
        let w = store.get(crate::nn::ParamId(0)).data().to_vec();
        let e0 = 1.0 * (1.0 - 0.001) - 0.1 * 0.5 / (0.5 + 1e-8);
        let e1 = -2.0 * (1.0 - 0.001) + 0.1 * 0.25 / (0.25 + 1e-8);
        assert!((w[0] - e0).abs() < 1e-15 && (w[1] - e1).abs() < 1e-15);
        assert_eq!(store.get(crate::nn::ParamId(1)).data(), &[3.0]);
        // Second step against a scalar recurrence.
        opt.step(&mut store, &[Some(g), None], 0.1).unwrap();
        let (mut p, mut m, mut v) = (e0, 0.05, 0.001 * 0.25);
        m = 0.9 * m + 0.1 * 0.5;
        v = 0.999 * v + 0.001 * 0.25;
        p = p * (1.0 - 0.001) - 0.1 * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        assert!((store.get(crate::nn::ParamId(0)).data()[0] - p).abs() < 1e-14);
        assert_eq!(opt.steps(), 2);
    }
}
