//! GAN vocoder: a transposed-convolution generator with multi-receptive-field
//! residual blocks, plus multi-period and multi-scale discriminators.
//!
//! Generator parameter names: `conv_pre.*`, `ups.{i}.*` (weights laid out
//! `[c_in, c_out, k]`), `resblocks.{i * n_kernels + j}.convs{1,2}.{d}.*`,
//! `conv_post.*`. Discriminator names: `mpd.{p}.convs.{l}.*`,
//! `mpd.{p}.conv_post.*`, `msd.{s}.convs.{l}.*`, `msd.{s}.conv_post.*`.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Backend, ConvSpec, Eager};
use crate::error::bail_validation;
use crate::nn::{build_store, check_store, groups, Affine, Init, ParamSpec, ParamStore};
use crate::{AudioClip, MelSpec, Real, Result, Tensor, SAMPLE_RATE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocoderConfig {
    pub mel_bins: usize,
    pub hop_length: usize,
    pub upsample_rates: Vec<usize>,
    pub upsample_kernel_sizes: Vec<usize>,
    pub initial_channels: usize,
    pub resblock_kernel_sizes: Vec<usize>,
    pub resblock_dilations: Vec<Vec<usize>>,
    pub pre_kernel: usize,
    pub post_kernel: usize,
    pub leaky_slope: f64,
    pub final_leaky_slope: f64,
    pub init_std: f64,
    pub discriminator: DiscriminatorConfig,
}

impl Default for VocoderConfig {
    fn default() -> Self {
        Self::v1()
    }
}

impl VocoderConfig {
    /// The V1 topology adapted to a hop of 512 samples.
    pub fn v1() -> Self {
        Self {
            mel_bins: 128,
            hop_length: 512,
            upsample_rates: alloc::vec![8, 8, 4, 2],
            upsample_kernel_sizes: alloc::vec![16, 16, 8, 4],
            initial_channels: 512,
            resblock_kernel_sizes: alloc::vec![3, 7, 11],
            resblock_dilations: alloc::vec![alloc::vec![1, 3, 5]; 3],
            pre_kernel: 7,
            post_kernel: 7,
            leaky_slope: 0.1,
            final_leaky_slope: 0.01,
            init_std: 0.01,
            discriminator: DiscriminatorConfig::default(),
        }
    }

    /// Hop-512 generator with 32 initial channels and a matching small
    /// discriminator bank, for toy-scale training.
    pub fn toy() -> Self {
        Self {
            upsample_rates: alloc::vec![8, 8, 8],
            upsample_kernel_sizes: alloc::vec![16, 16, 16],
            initial_channels: 32,
            discriminator: DiscriminatorConfig::tiny(),
            ..Self::v1()
        }
    }

    /// Hop-8 generator with 8 channels on 16 Mel bins, for gradient checks.
    pub fn tiny() -> Self {
        Self {
            mel_bins: 16,
            hop_length: 8,
            upsample_rates: alloc::vec![4, 2],
            upsample_kernel_sizes: alloc::vec![8, 4],
            initial_channels: 8,
            resblock_kernel_sizes: alloc::vec![3, 5],
            resblock_dilations: alloc::vec![alloc::vec![1, 3]; 2],
            discriminator: DiscriminatorConfig::tiny(),
            ..Self::v1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.upsample_rates.len();
        if n == 0 || self.upsample_kernel_sizes.len() != n {
            bail_validation!("upsample_rates and upsample_kernel_sizes must be non-empty and equal length");
        }
        let product: usize = self.upsample_rates.iter().product();
        if product != self.hop_length {
            bail_validation!(
                "product of upsample_rates {:?} is {}, expected hop_length {}",
                self.upsample_rates,
                product,
                self.hop_length
            );
        }
        for (&u, &k) in self.upsample_rates.iter().zip(&self.upsample_kernel_sizes) {
            if u == 0 || k < u || (k - u) % 2 != 0 {
                bail_validation!("upsample kernel {k} incompatible with rate {u} (need k >= u, k - u even)");
            }
        }
        if self.initial_channels >> n == 0 {
            bail_validation!("initial_channels {} too small for {} upsampling stages", self.initial_channels, n);
        }
        if self.resblock_kernel_sizes.is_empty()
            || self.resblock_dilations.len() != self.resblock_kernel_sizes.len()
            || self.resblock_dilations.iter().any(|d| d.is_empty() || d.contains(&0))
        {
            bail_validation!("each resblock kernel needs a non-empty dilation list of positive values");
        }
        let odd = |k: usize| k % 2 == 1;
        if !odd(self.pre_kernel) || !odd(self.post_kernel) || !self.resblock_kernel_sizes.iter().all(|&k| odd(k)) {
            bail_validation!("generator conv kernels must be odd");
        }
        if self.mel_bins == 0 || !(self.init_std > 0.0) {
            bail_validation!("mel_bins and init_std must be positive");
        }
        self.discriminator.validate()
    }

    fn channels(&self, stage: usize) -> usize {
        self.initial_channels >> stage
    }

    /// Declared generator parameters in canonical order.
    pub fn generator_specs(&self) -> Vec<ParamSpec> {
        let w = Init::Normal { std: self.init_std };
        let mut s = Vec::new();
        let mut conv = |name: &str, shape: [usize; 3], bias: usize| {
            s.push(ParamSpec::new(format!("{name}.weight"), &shape, w));
            s.push(ParamSpec::new(format!("{name}.bias"), &[bias], Init::Zeros));
        };
        let c0 = self.initial_channels;
        conv("conv_pre", [c0, self.mel_bins, self.pre_kernel], c0);
        for (i, &k) in self.upsample_kernel_sizes.iter().enumerate() {
            let (cin, cout) = (self.channels(i), self.channels(i + 1));
            conv(&format!("ups.{i}"), [cin, cout, k], cout);
        }
        let nk = self.resblock_kernel_sizes.len();
        for i in 0..self.upsample_rates.len() {
            let ch = self.channels(i + 1);
            for (j, (&k, dil)) in self.resblock_kernel_sizes.iter().zip(&self.resblock_dilations).enumerate() {
                for which in ["convs1", "convs2"] {
                    for d in 0..dil.len() {
                        conv(&format!("resblocks.{}.{which}.{d}", i * nk + j), [ch, ch, k], ch);
                    }
                }
            }
        }
        let last = self.channels(self.upsample_rates.len());
        conv("conv_post", [1, last, self.post_kernel], 1);
        s
    }
}

/// Exact number of generator parameters for `cfg`.
pub fn count_generator_parameters(cfg: &VocoderConfig) -> usize {
    cfg.generator_specs().iter().map(ParamSpec::numel).sum()
}

/// One residual unit: two convs per dilation.
#[derive(Debug, Clone)]
struct ResBlock {
    kernel: usize,
    dilations: Vec<usize>,
    convs1: Vec<Affine>,
    convs2: Vec<Affine>,
}

/// Waveform generator.
#[derive(Debug, Clone)]
pub struct Generator<T> {
    cfg: VocoderConfig,
    params: ParamStore<T>,
    conv_pre: Affine,
    ups: Vec<Affine>,
    resblocks: Vec<ResBlock>,
    conv_post: Affine,
}

impl<T: Real> Generator<T> {
    pub fn new(cfg: &VocoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = build_store(groups::GENERATOR, &cfg.generator_specs(), &mut rng);
        Self::from_params(cfg, store)
    }

    pub fn from_params(cfg: &VocoderConfig, params: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        check_store(&params, &cfg.generator_specs())?;
        let nk = cfg.resblock_kernel_sizes.len();
        let mut resblocks = Vec::new();
        for i in 0..cfg.upsample_rates.len() {
            for (j, (&k, dil)) in cfg.resblock_kernel_sizes.iter().zip(&cfg.resblock_dilations).enumerate() {
                let find = |which: &str| -> Vec<Affine> {
                    (0..dil.len())
                        .map(|d| Affine::find(&params, &format!("resblocks.{}.{which}.{d}", i * nk + j)))
                        .collect()
                };
                resblocks.push(ResBlock {
                    kernel: k,
                    dilations: dil.clone(),
                    convs1: find("convs1"),
                    convs2: find("convs2"),
                });
            }
        }
        Ok(Self {
            conv_pre: Affine::find(&params, "conv_pre"),
            ups: (0..cfg.upsample_rates.len())
                .map(|i| Affine::find(&params, &format!("ups.{i}")))
                .collect(),
            conv_post: Affine::find(&params, "conv_post"),
            resblocks,
            cfg: cfg.clone(),
            params,
        })
    }

    pub fn config(&self) -> &VocoderConfig {
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

    fn conv<'a, B: Backend<'a, T>>(&'a self, b: &mut B, x: &B::V, p: Affine, spec: ConvSpec) -> Result<B::V> {
        let w = b.param(&self.params, p.weight);
        let bias = b.param(&self.params, p.bias);
        b.conv1d(x, &w, Some(&bias), spec)
    }

    /// `[batch, frames, mel_bins]` log-Mel to `[batch, 1, frames * hop]` audio.
    pub fn forward<'a, B: Backend<'a, T>>(&'a self, b: &mut B, mel: &B::V) -> Result<B::V> {
        let shape = b.shape(mel);
        if shape.len() != 3 || shape[2] != self.cfg.mel_bins || shape[1] == 0 {
            bail_validation!("generator expects [batch, frames, {}], got {:?}", self.cfg.mel_bins, shape);
        }
        if !b.value(mel).all_finite() {
            bail_validation!("generator input contains non-finite values");
        }
        let slope = self.cfg.leaky_slope;
        let x = b.permute(mel, &[0, 2, 1])?;
        let mut x = self.conv(b, &x, self.conv_pre, ConvSpec::same(self.cfg.pre_kernel / 2))?;
        let nk = self.cfg.resblock_kernel_sizes.len();
        for (i, up) in self.ups.iter().enumerate() {
            x = b.leaky_relu(&x, slope)?;
            let (u, k) = (self.cfg.upsample_rates[i], self.cfg.upsample_kernel_sizes[i]);
            let w = b.param(&self.params, up.weight);
            let bias = b.param(&self.params, up.bias);
            x = b.conv_transpose1d(&x, &w, Some(&bias), u, (k - u) / 2)?;
            let mut acc: Option<B::V> = None;
            for rb in &self.resblocks[i * nk..(i + 1) * nk] {
                let y = self.resblock(b, &x, rb)?;
                acc = Some(match acc {
                    Some(a) => b.add(&a, &y)?,
                    None => y,
                });
            }
            let sum = acc.expect("at least one resblock");
            x = b.scale(&sum, 1.0 / nk as f64)?;
        }
        let x = b.leaky_relu(&x, self.cfg.final_leaky_slope)?;
        let x = self.conv(b, &x, self.conv_post, ConvSpec::same(self.cfg.post_kernel / 2))?;
        b.tanh(&x)
    }

    fn resblock<'a, B: Backend<'a, T>>(&'a self, b: &mut B, x: &B::V, rb: &ResBlock) -> Result<B::V> {
        let slope = self.cfg.leaky_slope;
        let k = rb.kernel;
        let mut x = x.clone();
        for ((&d, &c1), &c2) in rb.dilations.iter().zip(&rb.convs1).zip(&rb.convs2) {
            let t = b.leaky_relu(&x, slope)?;
            let t = self.conv(b, &t, c1, ConvSpec::same(d * (k - 1) / 2).with_dilation(d))?;
            let t = b.leaky_relu(&t, slope)?;
            let t = self.conv(b, &t, c2, ConvSpec::same((k - 1) / 2))?;
            x = b.add(&t, &x)?;
        }
        Ok(x)
    }

    /// Eval-mode synthesis of one spectrogram: `frames * hop` samples.
    pub fn synthesize(&self, mel: &MelSpec) -> Result<AudioClip> {
        let input = mel.to_tensor::<T>().reshape(&[1, mel.frames(), mel.n_mels()])?;
        let mut e = Eager::new();
        let x = Backend::<T>::constant(&mut e, input);
        let y = self.forward(&mut e, &x)?;
        let samples = y.data().iter().map(|v| v.as_f64() as f32).collect();
        AudioClip::new(samples, SAMPLE_RATE)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub periods: Vec<usize>,
    /// Output channels of the period convolutions; all but the last use stride 3.
    pub mpd_channels: Vec<usize>,
    pub mpd_kernel: usize,
    pub mpd_stride: usize,
    pub scales: usize,
    pub msd_channels: Vec<usize>,
    pub msd_kernels: Vec<usize>,
    pub msd_strides: Vec<usize>,
    pub msd_groups: Vec<usize>,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            periods: alloc::vec![2, 3, 5, 7, 11],
            mpd_channels: alloc::vec![32, 128, 512, 1024, 1024],
            mpd_kernel: 5,
            mpd_stride: 3,
            scales: 3,
            msd_channels: alloc::vec![128, 128, 256, 512, 1024, 1024, 1024],
            msd_kernels: alloc::vec![15, 41, 41, 41, 41, 41, 5],
            msd_strides: alloc::vec![1, 2, 2, 4, 4, 1, 1],
            msd_groups: alloc::vec![1, 4, 16, 16, 16, 16, 1],
            leaky_slope: 0.1,
        }
    }
}

impl DiscriminatorConfig {
    /// Same topology with 16 channels at most.
    pub fn tiny() -> Self {
        Self {
            mpd_channels: alloc::vec![4, 8, 16, 16, 16],
            msd_channels: alloc::vec![8, 8, 16, 16, 16, 16, 16],
            msd_groups: alloc::vec![1, 2, 4, 4, 4, 4, 1],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.periods.is_empty() || self.periods.contains(&0) {
            bail_validation!("periods must be non-empty and positive");
        }
        if self.mpd_channels.is_empty() || self.mpd_kernel % 2 == 0 || self.mpd_stride == 0 {
            bail_validation!("invalid period discriminator layout");
        }
        let n = self.msd_channels.len();
        if n == 0 || self.msd_kernels.len() != n || self.msd_strides.len() != n || self.msd_groups.len() != n {
            bail_validation!("msd channel, kernel, stride and group lists must have equal non-zero length");
        }
        let mut cin = 1;
        for l in 0..n {
            let (c, g, k) = (self.msd_channels[l], self.msd_groups[l], self.msd_kernels[l]);
            if g == 0 || cin % g != 0 || c % g != 0 || k % 2 == 0 || self.msd_strides[l] == 0 {
                bail_validation!("msd layer {l}: {cin}->{c} channels, groups {g}, kernel {k} is invalid");
            }
            cin = c;
        }
        Ok(())
    }

    /// Declared discriminator parameters in canonical order.
    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut s = Vec::new();
        let mut conv = |name: &str, shape: [usize; 3]| {
            let fan_in = shape[1] * shape[2];
            s.push(ParamSpec::new(format!("{name}.weight"), &shape, Init::Uniform { fan_in }));
            s.push(ParamSpec::new(format!("{name}.bias"), &shape[..1], Init::Uniform { fan_in }));
        };
        for (j, _) in self.periods.iter().enumerate() {
            let mut cin = 1;
            for (l, &c) in self.mpd_channels.iter().enumerate() {
                conv(&format!("mpd.{j}.convs.{l}"), [c, cin, self.mpd_kernel]);
                cin = c;
            }
            conv(&format!("mpd.{j}.conv_post"), [1, cin, 3]);
        }
        for sc in 0..self.scales {
            let mut cin = 1;
            for l in 0..self.msd_channels.len() {
                let c = self.msd_channels[l];
                conv(&format!("msd.{sc}.convs.{l}"), [c, cin / self.msd_groups[l], self.msd_kernels[l]]);
                cin = c;
            }
            conv(&format!("msd.{sc}.conv_post"), [1, cin, 3]);
        }
        s
    }
}

/// Scores and intermediate feature maps of every discriminator, in bank order
/// (periods first, then scales).
#[derive(Debug, Clone)]
pub struct DiscOutput<V> {
    /// One `[batch, n]` score map per discriminator.
    pub scores: Vec<V>,
    /// Per discriminator, the activations of every layer including the score.
    pub features: Vec<Vec<V>>,
}

/// Multi-period plus multi-scale discriminator bank.
#[derive(Debug, Clone)]
pub struct Discriminators<T> {
    cfg: DiscriminatorConfig,
    params: ParamStore<T>,
    mpd: Vec<(Vec<Affine>, Affine)>,
    msd: Vec<(Vec<Affine>, Affine)>,
}

impl<T: Real> Discriminators<T> {
    pub fn new(cfg: &DiscriminatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = build_store(groups::DISCRIMINATORS, &cfg.specs(), &mut rng);
        Self::from_params(cfg, store)
    }

    pub fn from_params(cfg: &DiscriminatorConfig, params: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        check_store(&params, &cfg.specs())?;
        let layers = |prefix: &str, n: usize| {
            let convs = (0..n)
                .map(|l| Affine::find(&params, &format!("{prefix}.convs.{l}")))
                .collect();
            (convs, Affine::find(&params, &format!("{prefix}.conv_post")))
        };
        let mpd = (0..cfg.periods.len())
            .map(|j| layers(&format!("mpd.{j}"), cfg.mpd_channels.len()))
            .collect();
        let msd = (0..cfg.scales)
            .map(|s| layers(&format!("msd.{s}"), cfg.msd_channels.len()))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            params,
            mpd,
            msd,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
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

    pub fn len(&self) -> usize {
        self.mpd.len() + self.msd.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn conv<'a, B: Backend<'a, T>>(&'a self, b: &mut B, x: &B::V, p: Affine, spec: ConvSpec) -> Result<B::V> {
        let w = b.param(&self.params, p.weight);
        let bias = b.param(&self.params, p.bias);
        b.conv1d(x, &w, Some(&bias), spec)
    }

    /// Runs every discriminator on `[batch, 1, T]` audio.
    pub fn forward<'a, B: Backend<'a, T>>(&'a self, b: &mut B, wave: &B::V) -> Result<DiscOutput<B::V>> {
        let shape = b.shape(wave);
        if shape.len() != 3 || shape[1] != 1 || shape[2] == 0 {
            bail_validation!("discriminators expect [batch, 1, samples], got {:?}", shape);
        }
        let (batch, len) = (shape[0], shape[2]);
        let mut out = DiscOutput {
            scores: Vec::new(),
            features: Vec::new(),
        };
        let slope = self.cfg.leaky_slope;
        for (&p, (convs, post)) in self.cfg.periods.iter().zip(&self.mpd) {
            let pad = (p - len % p) % p;
            let x = if pad > 0 { b.pad_reflect(wave, 0, pad)? } else { wave.clone() };
            let cols = (len + pad) / p;
            let x = b.reshape(&x, &[batch, cols, p])?;
            let x = b.permute(&x, &[0, 2, 1])?;
            let mut x = b.reshape(&x, &[batch * p, 1, cols])?;
            let mut feats = Vec::new();
            let half = self.cfg.mpd_kernel / 2;
            for (l, &c) in convs.iter().enumerate() {
                let stride = if l + 1 < convs.len() { self.cfg.mpd_stride } else { 1 };
                x = self.conv(b, &x, c, ConvSpec::same(half).with_stride(stride))?;
                x = b.leaky_relu(&x, slope)?;
                feats.push(x.clone());
            }
            let s = self.conv(b, &x, *post, ConvSpec::same(1))?;
            feats.push(s.clone());
            let n = b.value(&s).len() / batch;
            out.scores.push(b.reshape(&s, &[batch, n])?);
            out.features.push(feats);
        }
        let mut x_scale = wave.clone();
        for (sc, (convs, post)) in self.msd.iter().enumerate() {
            if sc > 0 {
                x_scale = b.avg_pool1d(&x_scale, 4, 2, 2)?;
            }
            let mut x = x_scale.clone();
            let mut feats = Vec::new();
            for (l, &c) in convs.iter().enumerate() {
                let k = self.cfg.msd_kernels[l];
                let spec = ConvSpec::same(k / 2)
                    .with_stride(self.cfg.msd_strides[l])
                    .with_groups(self.cfg.msd_groups[l]);
                x = self.conv(b, &x, c, spec)?;
                x = b.leaky_relu(&x, slope)?;
                feats.push(x.clone());
            }
            let s = self.conv(b, &x, *post, ConvSpec::same(1))?;
            feats.push(s.clone());
            let n = b.value(&s).len() / batch;
            out.scores.push(b.reshape(&s, &[batch, n])?);
            out.features.push(feats);
        }
        Ok(out)
    }
}

/// Convenience: `[batch, 1, T]` tensor of one clip.
pub fn wave_tensor<T: Real>(clip: &AudioClip) -> Tensor<T> {
    Tensor::from_fn(&[1, 1, clip.len()], |i| T::from_f64(clip.samples()[i] as f64))
}
