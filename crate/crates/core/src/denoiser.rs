//! Transformer Mel denoiser.
//!
//! Frames of a log-Mel spectrogram are projected to `c_emb` channels, given a
//! sinusoidal position code, passed through `N` blocks of self-attention and a
//! convolutional feed-forward sublayer (kernel 9, GELU, kernel 1), and
//! projected back to `c_bin` Mel bins.
//!
//! Canonical parameter names follow the `[out, in]` weight convention:
//!
//! | name | shape |
//! |------|-------|
//! | `input_proj.weight`, `.bias` | `[c_emb, c_bin]`, `[c_emb]` |
//! | `blocks.{i}.norm1.weight`, `.bias` | `[c_emb]` |
//! | `blocks.{i}.attn.{q,k,v,out}_proj.weight`, `.bias` | `[c_emb, c_emb]`, `[c_emb]` |
//! | `blocks.{i}.norm2.weight`, `.bias` | `[c_emb]` |
//! | `blocks.{i}.conv1.weight`, `.bias` | `[c_hidden, c_emb, k0]`, `[c_hidden]` |
//! | `blocks.{i}.conv2.weight`, `.bias` | `[c_emb, c_hidden, k1]`, `[c_emb]` |
//! | `output_proj.weight`, `.bias` | `[c_bin, c_emb]`, `[c_bin]` |

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Backend, ConvSpec, Eager};
use crate::error::bail_validation;
use crate::nn::{build_store, check_store, groups, Affine, Init, ParamSpec, ParamStore};
use crate::{MelSpec, Real, Result, Tensor};

/// Placement of the layer norms relative to the residual sublayers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPlacement {
    Pre,
    Post,
}

/// Padding used by the block convolutions to keep the frame count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvPadding {
    Reflect,
    Zero,
}

/// Attention pattern. `Identity` replaces the softmax weights by the identity
/// matrix (each frame attends only to itself); it exists for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Full,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub n_layers: usize,
    pub c_emb: usize,
    pub c_hidden: usize,
    pub c_bin: usize,
    pub conv_kernels: [usize; 2],
    pub n_heads: usize,
    pub dropout: f64,
    pub max_frames: usize,
    pub positional_encoding: bool,
    pub norm: NormPlacement,
    pub conv_padding: ConvPadding,
    pub attention: AttentionMode,
    pub layer_norm_eps: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self::large()
    }
}

impl DenoiserConfig {
    /// 12 blocks, 384 channels.
    pub fn large() -> Self {
        Self::with_size(12, 384)
    }

    /// 8 blocks, 256 channels.
    pub fn base() -> Self {
        Self::with_size(8, 256)
    }

    /// 2 blocks, 32 channels, for tests and smoke runs.
    pub fn tiny() -> Self {
        Self {
            n_heads: 2,
            ..Self::with_size(2, 32)
        }
    }

    /// `n_layers` blocks of width `c_emb` with `c_emb / 64` heads.
    pub fn with_size(n_layers: usize, c_emb: usize) -> Self {
        Self {
            n_layers,
            c_emb,
            c_hidden: 4 * c_emb,
            c_bin: 128,
            conv_kernels: [9, 1],
            n_heads: (c_emb / 64).max(1),
            dropout: 0.1,
            max_frames: 4096,
            positional_encoding: true,
            norm: NormPlacement::Pre,
            conv_padding: ConvPadding::Reflect,
            attention: AttentionMode::Full,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.c_emb == 0 || self.c_bin == 0 || self.max_frames == 0 {
            bail_validation!("denoiser dimensions must be positive");
        }
        if self.c_hidden != 4 * self.c_emb {
            bail_validation!("c_hidden {} must equal 4 * c_emb ({})", self.c_hidden, 4 * self.c_emb);
        }
        if self.n_heads == 0 || self.c_emb % self.n_heads != 0 {
            bail_validation!("c_emb {} not divisible by n_heads {}", self.c_emb, self.n_heads);
        }
        if self.conv_kernels.iter().any(|k| k % 2 == 0) {
            bail_validation!("conv kernels {:?} must be odd", self.conv_kernels);
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bail_validation!("dropout {} outside [0, 1)", self.dropout);
        }
        if !(self.layer_norm_eps > 0.0) {
            bail_validation!("layer_norm_eps must be positive");
        }
        Ok(())
    }

    /// Declared parameters in canonical order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (c, h, m) = (self.c_emb, self.c_hidden, self.c_bin);
        let [k0, k1] = self.conv_kernels;
        let mut s = Vec::new();
        let affine = |s: &mut Vec<ParamSpec>, name: &str, w: &[usize], fan_in: usize| {
            s.push(ParamSpec::new(format!("{name}.weight"), w, Init::Uniform { fan_in }));
            s.push(ParamSpec::new(format!("{name}.bias"), &w[..1], Init::Uniform { fan_in }));
        };
        let norm = |s: &mut Vec<ParamSpec>, name: &str| {
            s.push(ParamSpec::new(format!("{name}.weight"), &[c], Init::Ones));
            s.push(ParamSpec::new(format!("{name}.bias"), &[c], Init::Zeros));
        };
        affine(&mut s, "input_proj", &[c, m], m);
        for i in 0..self.n_layers {
            let p = format!("blocks.{i}");
            norm(&mut s, &format!("{p}.norm1"));
            for proj in ["q", "k", "v", "out"] {
                affine(&mut s, &format!("{p}.attn.{proj}_proj"), &[c, c], c);
            }
            norm(&mut s, &format!("{p}.norm2"));
            affine(&mut s, &format!("{p}.conv1"), &[h, c, k0], c * k0);
            affine(&mut s, &format!("{p}.conv2"), &[c, h, k1], h * k1);
        }
        affine(&mut s, "output_proj", &[m, c], c);
        s
    }
}

/// Exact number of trainable scalars of the denoiser built from `cfg`.
pub fn count_parameters(cfg: &DenoiserConfig) -> usize {
    cfg.param_specs().iter().map(ParamSpec::numel).sum()
}

#[derive(Debug, Clone, Copy)]
struct BlockIds {
    norm1: Affine,
    q: Affine,
    k: Affine,
    v: Affine,
    out: Affine,
    norm2: Affine,
    conv1: Affine,
    conv2: Affine,
}

/// Mel denoiser with its parameters.
#[derive(Debug, Clone)]
pub struct Denoiser<T> {
    cfg: DenoiserConfig,
    params: ParamStore<T>,
    input_proj: Affine,
    blocks: Vec<BlockIds>,
    output_proj: Affine,
}

impl<T: Real> Denoiser<T> {
    /// Randomly initialized model (PyTorch-style fan-in uniform init).
    pub fn new(cfg: &DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = build_store(groups::DENOISER, &cfg.param_specs(), &mut rng);
        Self::from_params(cfg, store)
    }

    /// Wraps existing parameters, checking names and shapes.
    pub fn from_params(cfg: &DenoiserConfig, params: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        check_store(&params, &cfg.param_specs())?;
        let blocks = (0..cfg.n_layers)
            .map(|i| {
                let f = |n: &str| Affine::find(&params, &format!("blocks.{i}.{n}"));
                BlockIds {
                    norm1: f("norm1"),
                    q: f("attn.q_proj"),
                    k: f("attn.k_proj"),
                    v: f("attn.v_proj"),
                    out: f("attn.out_proj"),
                    norm2: f("norm2"),
                    conv1: f("conv1"),
                    conv2: f("conv2"),
                }
            })
            .collect();
        Ok(Self {
            input_proj: Affine::find(&params, "input_proj"),
            output_proj: Affine::find(&params, "output_proj"),
            blocks,
            cfg: cfg.clone(),
            params,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    fn check_input(&self, shape: &[usize], values: &Tensor<T>) -> Result<()> {
        if shape.len() != 3 || shape[2] != self.cfg.c_bin || shape[1] == 0 {
            bail_validation!(
                "denoiser expects [batch, frames, {}], got {:?}",
                self.cfg.c_bin,
                shape
            );
        }
        if shape[1] > self.cfg.max_frames {
            bail_validation!("{} frames exceed max_frames {}", shape[1], self.cfg.max_frames);
        }
        if !values.all_finite() {
            bail_validation!("denoiser input contains non-finite values");
        }
        Ok(())
    }

    /// Maps `[batch, frames, c_bin]` log-Mel frames to the same shape.
    pub fn forward<'a, B: Backend<'a, T>>(&'a self, b: &mut B, mel: &B::V) -> Result<B::V> {
        let shape = b.shape(mel);
        self.check_input(&shape, b.value(mel))?;
        let (batch, frames) = (shape[0], shape[1]);
        let mut x = self.linear(b, mel, self.input_proj)?;
        if self.cfg.positional_encoding {
            let pe = b.constant(positional_encoding(batch, frames, self.cfg.c_emb));
            x = b.add(&x, &pe)?;
        }
        for blk in &self.blocks {
            x = self.block(b, x, blk, batch, frames)?;
        }
        self.linear(b, &x, self.output_proj)
    }

    /// Eval-mode inference on a single spectrogram.
    pub fn denoise(&self, mel: &MelSpec) -> Result<MelSpec> {
        let input = mel.to_tensor::<T>().reshape(&[1, mel.frames(), mel.n_mels()])?;
        let mut e = Eager::new();
        let x = Backend::<T>::constant(&mut e, input);
        let y = self.forward(&mut e, &x)?;
        MelSpec::from_tensor(&y.into_owned())
    }

    fn linear<'a, B: Backend<'a, T>>(&'a self, b: &mut B, x: &B::V, p: Affine) -> Result<B::V> {
        let w = b.param(&self.params, p.weight);
        let bias = b.param(&self.params, p.bias);
        let y = b.matmul(x, &w, false, true)?;
        let axis = b.shape(&y).len() - 1;
        b.add_bias(&y, &bias, axis)
    }

    fn norm<'a, B: Backend<'a, T>>(&'a self, b: &mut B, x: &B::V, p: Affine) -> Result<B::V> {
        let g = b.param(&self.params, p.weight);
        let beta = b.param(&self.params, p.bias);
        b.layer_norm(x, &g, &beta, self.cfg.layer_norm_eps)
    }

    fn block<'a, B: Backend<'a, T>>(
        &'a self,
        b: &mut B,
        x: B::V,
        p: &BlockIds,
        batch: usize,
        frames: usize,
    ) -> Result<B::V> {
        let pre = self.cfg.norm == NormPlacement::Pre;
        let h = if pre { self.norm(b, &x, p.norm1)? } else { x.clone() };
        let a = self.attention(b, &h, p, batch, frames)?;
        let a = b.dropout(a, self.cfg.dropout)?;
        let mut x = b.add(&x, &a)?;
        if !pre {
            x = self.norm(b, &x, p.norm1)?;
        }
        let h = if pre { self.norm(b, &x, p.norm2)? } else { x.clone() };
        let f = self.conv_ffn(b, &h, p)?;
        let f = b.dropout(f, self.cfg.dropout)?;
        let mut x = b.add(&x, &f)?;
        if !pre {
            x = self.norm(b, &x, p.norm2)?;
        }
        Ok(x)
    }

    fn attention<'a, B: Backend<'a, T>>(
        &'a self,
        b: &mut B,
        h: &B::V,
        p: &BlockIds,
        batch: usize,
        frames: usize,
    ) -> Result<B::V> {
        let (c, nh) = (self.cfg.c_emb, self.cfg.n_heads);
        let dh = c / nh;
        let v = self.linear(b, h, p.v)?;
        let ctx = match self.cfg.attention {
            AttentionMode::Identity => v,
            AttentionMode::Full => {
                let heads = |b: &mut B, t: &B::V| -> Result<B::V> {
                    let t = b.reshape(t, &[batch, frames, nh, dh])?;
                    let t = b.permute(&t, &[0, 2, 1, 3])?;
                    b.reshape(&t, &[batch * nh, frames, dh])
                };
                let q = self.linear(b, h, p.q)?;
                let k = self.linear(b, h, p.k)?;
                let (q, k, v) = (heads(b, &q)?, heads(b, &k)?, heads(b, &v)?);
                let scores = b.matmul(&q, &k, false, true)?;
                let scores = b.scale(&scores, 1.0 / libm::sqrt(dh as f64))?;
                let attn = b.softmax(&scores)?;
                let ctx = b.matmul(&attn, &v, false, false)?;
                let ctx = b.reshape(&ctx, &[batch, nh, frames, dh])?;
                let ctx = b.permute(&ctx, &[0, 2, 1, 3])?;
                b.reshape(&ctx, &[batch, frames, c])?
            }
        };
        self.linear(b, &ctx, p.out)
    }

    fn conv<'a, B: Backend<'a, T>>(&'a self, b: &mut B, x: &B::V, p: Affine, k: usize) -> Result<B::V> {
        let w = b.param(&self.params, p.weight);
        let bias = b.param(&self.params, p.bias);
        let pad = k / 2;
        match self.cfg.conv_padding {
            ConvPadding::Zero => b.conv1d(x, &w, Some(&bias), ConvSpec::same(pad)),
            ConvPadding::Reflect if pad > 0 => {
                let xp = b.pad_reflect(x, pad, pad)?;
                b.conv1d(&xp, &w, Some(&bias), ConvSpec::same(0))
            }
            ConvPadding::Reflect => b.conv1d(x, &w, Some(&bias), ConvSpec::same(0)),
        }
    }

    fn conv_ffn<'a, B: Backend<'a, T>>(&'a self, b: &mut B, h: &B::V, p: &BlockIds) -> Result<B::V> {
        let [k0, k1] = self.cfg.conv_kernels;
        let t = b.permute(h, &[0, 2, 1])?;
        let t = self.conv(b, &t, p.conv1, k0)?;
        let t = b.gelu(&t)?;
        let t = self.conv(b, &t, p.conv2, k1)?;
        b.permute(&t, &[0, 2, 1])
    }
}

/// Sinusoidal position code tiled over the batch: `[batch, frames, dim]`.
pub fn positional_encoding<T: Real>(batch: usize, frames: usize, dim: usize) -> Tensor<T> {
    let mut one = vec![T::zero(); frames * dim];
    for pos in 0..frames {
        for i in 0..dim {
            let rate = libm::pow(10_000.0, -((i - i % 2) as f64) / dim as f64);
            let a = pos as f64 * rate;
            one[pos * dim + i] = T::from_f64(if i % 2 == 0 { libm::sin(a) } else { libm::cos(a) });
        }
    }
    let mut data = Vec::with_capacity(batch * one.len());
    for _ in 0..batch {
        data.extend_from_slice(&one);
    }
    Tensor::new(&[batch, frames, dim], data).expect("positional encoding shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use rand::Rng;

    fn block_oracle(c: usize) -> usize {
        let h = 4 * c;
        let attention = 4 * c * c + 4 * c;
        let norms = 2 * 2 * c;
        let conv1 = 9 * c * h + h;
        let conv2 = h * c + c;
        attention + norms + conv1 + conv2
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for (n, c) in [(12, 384), (8, 256), (2, 32)] {
            let cfg = DenoiserConfig::with_size(n, c);
            let io = (128 * c + c) + (c * 128 + 128);
            assert_eq!(count_parameters(&cfg), n * block_oracle(c) + io);
        }
        let tiny = DenoiserConfig::tiny();
        let d = Denoiser::<f32>::new(&tiny, 0).unwrap();
        assert_eq!(d.params().num_scalars(), count_parameters(&tiny));
    }

    #[test]
    fn preserves_shape_and_rejects_bad_input() {
        let d = Denoiser::<f32>::new(&DenoiserConfig::tiny(), 1).unwrap();
        let mut e = Eager::new();
        let x = Backend::<f32>::constant(&mut e, Tensor::full(&[2, 87, 128], -3.0));
        assert_eq!(d.forward(&mut e, &x).unwrap().shape(), &[2, 87, 128]);
        let bad = Backend::<f32>::constant(&mut e, Tensor::full(&[1, 5, 64], 0.0));
        assert!(d.forward(&mut e, &bad).is_err());
        let nan = Backend::<f32>::constant(&mut e, Tensor::full(&[1, 5, 128], f32::NAN));
        assert!(d.forward(&mut e, &nan).is_err());
        let mut cfg = DenoiserConfig::tiny();
        cfg.max_frames = 16;
        let d = Denoiser::<f32>::new(&cfg, 1).unwrap();
        let long = Backend::<f32>::constant(&mut e, Tensor::full(&[1, 17, 128], 0.0));
        assert!(d.forward(&mut e, &long).is_err());
    }

    #[test]
    fn identical_frames_stay_identical_without_positions() {
        let mut cfg = DenoiserConfig::tiny();
        cfg.positional_encoding = false;
        let d = Denoiser::<f64>::new(&cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frame: Vec<f64> = (0..128).map(|_| rng.gen_range(-5.0..0.0)).collect();
        let mut data = Vec::new();
        for _ in 0..12 {
            data.extend_from_slice(&frame);
        }
        let mel = MelSpec::new(data.iter().map(|&v| v as f32).collect(), 12, 128).unwrap();
        let out = d.denoise(&mel).unwrap();
        for f in 1..12 {
            assert_eq!(out.frame(f), out.frame(0));
        }
    }

    #[test]
    fn zero_output_projection_gives_zero_output() {
        let mut d = Denoiser::<f32>::new(&DenoiserConfig::tiny(), 4).unwrap();
        for name in ["output_proj.weight", "output_proj.bias"] {
            let id = d.params().find(name).unwrap();
            let z = Tensor::zeros(d.params().get(id).shape());
            d.params_mut().set(id, z).unwrap();
        }
        let mel = MelSpec::new(vec![-1.0; 9 * 128], 9, 128).unwrap();
        assert!(d.denoise(&mel).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_mode_is_deterministic_and_training_mode_uses_dropout() {
        let d = Denoiser::<f32>::new(&DenoiserConfig::tiny(), 5).unwrap();
        let mel = MelSpec::new((0..10 * 128).map(|i| (i % 7) as f32 * -0.5).collect(), 10, 128).unwrap();
        assert_eq!(d.denoise(&mel).unwrap(), d.denoise(&mel).unwrap());
        let x = mel.to_tensor::<f32>().reshape(&[1, 10, 128]).unwrap();
        let run = |training: bool| {
            let mut g = Graph::new(training, 9);
            let xv = g.constant(x.clone());
            let y = d.forward(&mut g, &xv).unwrap();
            g.value(&y).clone()
        };
        assert_eq!(run(false).data(), d.denoise(&mel).unwrap().values());
        assert_ne!(run(true), run(false));
    }

    #[test]
    fn post_norm_and_zero_padding_variants_run() {
        let mut cfg = DenoiserConfig::tiny();
        cfg.norm = NormPlacement::Post;
        cfg.conv_padding = ConvPadding::Zero;
        let d = Denoiser::<f32>::new(&cfg, 6).unwrap();
        let mel = MelSpec::new(vec![-2.0; 3 * 128], 3, 128).unwrap();
        assert_eq!(d.denoise(&mel).unwrap().frames(), 3);
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding::<f64>(2, 3, 4);
        assert_eq!(pe.shape(), &[2, 3, 4]);
        let at = |p: usize, i: usize| pe.data()[12 + p * 4 + i];
        assert_eq!(at(0, 0), 0.0);
        assert_eq!(at(0, 1), 1.0);
        assert!((at(2, 0) - 2f64.sin()).abs() < 1e-15);
        assert!((at(2, 3) - (2.0 / 100.0f64).cos()).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let mut cfg = DenoiserConfig::base();
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.n_heads, 4);
        assert_eq!(DenoiserConfig::large().n_heads, 6);
        cfg.c_hidden = 100;
        assert!(cfg.validate().is_err());
        let mut cfg = DenoiserConfig::tiny();
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
    }
}
