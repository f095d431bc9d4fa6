//! Time-conditioned noise-prediction network.
//!
//! One architecture serves both roles: the guider denoises the mask channel
//! with the noisy image as guide, the conditional model denoises the image
//! channel with a clean(ed) mask as guide. The two inputs are concatenated
//! along the channel axis (primary first, guide second — fixed order) and the
//! network returns the predicted noise for the primary channel.
//!
//! Shape: encoder/decoder U-Net with skip connections, residual blocks with
//! group normalization and SiLU, nearest-neighbor upsampling, average-pool
//! downsampling, and a zero-initialized output convolution (an untrained net
//! predicts exactly zero noise).

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{concat_channels, Scalar, Tensor};

/// Network hyperparameters. Input channels are fixed at 2 and output
/// channels at 1 by construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenoiserConfig {
    /// Square input size; a power of two, at least 8.
    pub image_size: usize,
    pub base_channels: usize,
    /// Per-level width multipliers; the number of levels is the length.
    pub channel_mult: Vec<usize>,
    pub blocks_per_level: usize,
    /// Sinusoidal embedding width (even).
    pub time_embed_dim: usize,
    /// Largest timestep the net conditions on (the schedule length).
    pub max_timestep: usize,
}

impl DenoiserConfig {
    /// Desk-scale default: base width 32, two residual blocks per level,
    /// `max(2, log2(size) - 2)` levels with doubling multipliers.
    pub fn for_image_size(image_size: usize, max_timestep: usize) -> Self {
        let levels = (image_size.max(8).trailing_zeros() as usize).saturating_sub(2).max(2);
        DenoiserConfig {
            image_size,
            base_channels: 32,
            channel_mult: (0..levels).map(|i| 1 << i).collect(),
            blocks_per_level: 2,
            time_embed_dim: 64,
            max_timestep,
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_mult.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.image_size.is_power_of_two() || self.image_size < 8 {
            return Err(Error::config(format!(
                "image size {} must be a power of two >= 8",
                self.image_size
            )));
        }
        if self.levels() < 2 {
            return Err(Error::config("denoiser needs at least 2 levels"));
        }
        if self.image_size >> (self.levels() - 1) < 4 {
            return Err(Error::config(format!(
                "{} levels leave the bottom resolution below 4 for size {}",
                self.levels(),
                self.image_size
            )));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::config("time embedding dimension must be even and >= 2"));
        }
        if self.blocks_per_level < 1 || self.base_channels < 1 || self.max_timestep < 1 {
            return Err(Error::config("counts must be >= 1"));
        }
        // Every normalization site must split evenly into its groups; this
        // includes the decoder inputs where skip channels are concatenated.
        let levels = self.levels();
        let mut norm_widths: Vec<usize> = (0..levels).map(|i| self.channels(i)).collect();
        for level in 0..levels {
            let incoming = if level + 1 == levels {
                self.channels(level)
            } else {
                self.channels(level + 1)
            };
            norm_widths.push(incoming + self.channels(level));
        }
        for &c in &norm_widths {
            if c % groups_for(c) != 0 {
                return Err(Error::config(format!(
                    "normalized width {c} is not divisible into {} groups",
                    groups_for(c)
                )));
            }
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mult[level]
    }
}

/// Normalization group count: `min(8, channels)`.
pub fn groups_for(channels: usize) -> usize {
    channels.min(8)
}

/// Sinusoidal timestep embedding: half sine, half cosine over geometrically
/// spaced frequencies. Pure function of `(t, dim)`; all values in `[-1, 1]`.
pub fn time_embedding<E: Scalar>(t: usize, dim: usize, t_max: usize) -> Result<Tensor<E>> {
    if dim < 2 || dim % 2 != 0 {
        return Err(Error::config(format!(
            "time embedding dimension {dim} must be even and >= 2"
        )));
    }
    if t < 1 || t > t_max {
        return Err(Error::contract(format!("timestep {t} outside 1..={t_max}")));
    }
    let half = dim / 2;
    let mut data = vec![E::zero(); dim];
    for i in 0..half {
        let freq = 10000f64.powf(-(i as f64) / half as f64);
        let arg = t as f64 * freq;
        data[i] = E::from_f64(arg.sin());
        data[half + i] = E::from_f64(arg.cos());
    }
    Tensor::from_vec(&[dim], data)
}

fn kaiming_uniform<E: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<E> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| E::from_f64(rng.uniform_in(-bound, bound)))
        .collect();
    Tensor::param(shape, data).expect("shape/data agree")
}

struct Conv2dLayer<E: Scalar> {
    weight: Tensor<E>,
    bias: Tensor<E>,
    padding: usize,
}

impl<E: Scalar> Conv2dLayer<E> {
    fn new(cin: usize, cout: usize, ksize: usize, rng: &mut Rng) -> Self {
        Conv2dLayer {
            weight: kaiming_uniform(&[cout, cin, ksize, ksize], cin * ksize * ksize, rng),
            bias: Tensor::param(&[cout], vec![E::zero(); cout]).unwrap(),
            padding: ksize / 2,
        }
    }

    fn zeroed(cin: usize, cout: usize, ksize: usize) -> Self {
        Conv2dLayer {
            weight: Tensor::param(&[cout, cin, ksize, ksize], vec![E::zero(); cout * cin * ksize * ksize])
                .unwrap(),
            bias: Tensor::param(&[cout], vec![E::zero(); cout]).unwrap(),
            padding: ksize / 2,
        }
    }

    fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        x.conv2d(&self.weight, 1, self.padding)?.add_bias(&self.bias)
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

struct GroupNormLayer<E: Scalar> {
    gamma: Tensor<E>,
    beta: Tensor<E>,
    groups: usize,
}

impl<E: Scalar> GroupNormLayer<E> {
    fn new(channels: usize) -> Self {
        GroupNormLayer {
            gamma: Tensor::param(&[channels], vec![E::one(); channels]).unwrap(),
            beta: Tensor::param(&[channels], vec![E::zero(); channels]).unwrap(),
            groups: groups_for(channels),
        }
    }

    fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        x.group_norm(&self.gamma, &self.beta, self.groups)
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

struct LinearLayer<E: Scalar> {
    weight: Tensor<E>,
    bias: Tensor<E>,
}

impl<E: Scalar> LinearLayer<E> {
    fn new(din: usize, dout: usize, rng: &mut Rng) -> Self {
        LinearLayer {
            weight: kaiming_uniform(&[dout, din], din, rng),
            bias: Tensor::param(&[dout], vec![E::zero(); dout]).unwrap(),
        }
    }

    fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        x.linear(&self.weight, &self.bias)
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// norm -> silu -> conv, time injection, norm -> silu -> conv, residual skip
/// (1x1 projection when the channel count changes).
struct ResBlock<E: Scalar> {
    norm1: GroupNormLayer<E>,
    conv1: Conv2dLayer<E>,
    temb_proj: LinearLayer<E>,
    norm2: GroupNormLayer<E>,
    conv2: Conv2dLayer<E>,
    skip: Option<Conv2dLayer<E>>,
}

impl<E: Scalar> ResBlock<E> {
    fn new(cin: usize, cout: usize, tdim: usize, rng: &mut Rng) -> Self {
        ResBlock {
            norm1: GroupNormLayer::new(cin),
            conv1: Conv2dLayer::new(cin, cout, 3, rng),
            temb_proj: LinearLayer::new(tdim, cout, rng),
            norm2: GroupNormLayer::new(cout),
            conv2: Conv2dLayer::new(cout, cout, 3, rng),
            skip: (cin != cout).then(|| Conv2dLayer::new(cin, cout, 1, rng)),
        }
    }

    fn forward(&self, x: &Tensor<E>, temb: &Tensor<E>) -> Result<Tensor<E>> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu())?;
        let tv = self.temb_proj.forward(&temb.silu())?;
        let h = h.add_bias(&tv)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu())?;
        let shortcut = match &self.skip {
            Some(proj) => proj.forward(x)?,
            None => x.clone(),
        };
        h.add(&shortcut)
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        self.norm1.collect(&format!("{prefix}.norm1"), out);
        self.conv1.collect(&format!("{prefix}.conv1"), out);
        self.temb_proj.collect(&format!("{prefix}.temb"), out);
        self.norm2.collect(&format!("{prefix}.norm2"), out);
        self.conv2.collect(&format!("{prefix}.conv2"), out);
        if let Some(skip) = &self.skip {
            skip.collect(&format!("{prefix}.skip"), out);
        }
    }
}

/// The noise-prediction network.
pub struct Denoiser<E: Scalar = f32> {
    config: DenoiserConfig,
    time_fc1: LinearLayer<E>,
    time_fc2: LinearLayer<E>,
    stem: Conv2dLayer<E>,
    enc: Vec<Vec<ResBlock<E>>>,
    mid: ResBlock<E>,
    dec: Vec<Vec<ResBlock<E>>>,
    head_norm: GroupNormLayer<E>,
    head_conv: Conv2dLayer<E>,
}

impl<E: Scalar> Denoiser<E> {
    /// Build with Kaiming-uniform weights (zero-initialized output conv)
    /// drawn from `rng` in declaration order.
    pub fn init(config: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let tdim = config.time_embed_dim;
        let levels = config.levels();

        let time_fc1 = LinearLayer::new(tdim, tdim, rng);
        let time_fc2 = LinearLayer::new(tdim, tdim, rng);
        let stem = Conv2dLayer::new(2, config.channels(0), 3, rng);

        let mut enc = Vec::with_capacity(levels);
        let mut width = config.channels(0);
        for level in 0..levels {
            let cout = config.channels(level);
            let mut blocks = Vec::with_capacity(config.blocks_per_level);
            for b in 0..config.blocks_per_level {
                let cin = if b == 0 { width } else { cout };
                blocks.push(ResBlock::new(cin, cout, tdim, rng));
            }
            enc.push(blocks);
            width = cout;
        }

        let mid = ResBlock::new(width, width, tdim, rng);

        let mut dec = Vec::with_capacity(levels);
        for level in 0..levels {
            // Applied from the deepest level down; the first block fuses the
            // incoming features with the skip from the matching encoder level.
            let cout = config.channels(level);
            let incoming = if level + 1 == levels {
                config.channels(level)
            } else {
                config.channels(level + 1)
            };
            let mut blocks = Vec::with_capacity(config.blocks_per_level);
            for b in 0..config.blocks_per_level {
                let cin = if b == 0 { incoming + cout } else { cout };
                blocks.push(ResBlock::new(cin, cout, tdim, rng));
            }
            dec.push(blocks);
        }

        let head_norm = GroupNormLayer::new(config.channels(0));
        let head_conv = Conv2dLayer::zeroed(config.channels(0), 1, 3);

        Ok(Denoiser {
            config,
            time_fc1,
            time_fc2,
            stem,
            enc,
            mid,
            dec,
            head_norm,
            head_conv,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// Predicted noise for the primary channel. Both inputs are
    /// `[B, 1, H, W]` with `H = W = image_size`; the guide is concatenated
    /// after the primary channel.
    pub fn forward(&self, primary: &Tensor<E>, guide: &Tensor<E>, t: usize) -> Result<Tensor<E>> {
        let size = self.config.image_size;
        for (name, x) in [("primary", primary), ("guide", guide)] {
            match *x.shape() {
                [_, 1, h, w] if h == size && w == size => {}
                _ => {
                    return Err(Error::contract(format!(
                        "{name} channel must be [B, 1, {size}, {size}], got {:?}",
                        x.shape()
                    )))
                }
            }
        }
        if primary.shape() != guide.shape() {
            return Err(Error::contract(format!(
                "primary {:?} and guide {:?} batch sizes differ",
                primary.shape(),
                guide.shape()
            )));
        }
        if t < 1 || t > self.config.max_timestep {
            return Err(Error::contract(format!(
                "timestep {t} outside 1..={}",
                self.config.max_timestep
            )));
        }

        let emb = time_embedding::<E>(t, self.config.time_embed_dim, self.config.max_timestep)?;
        let temb = self.time_fc2.forward(&self.time_fc1.forward(&emb)?.silu())?;

        let x = concat_channels(primary, guide)?;
        let mut h = self.stem.forward(&x)?;

        let levels = self.config.levels();
        let mut skips = Vec::with_capacity(levels);
        for (level, blocks) in self.enc.iter().enumerate() {
            for block in blocks {
                h = block.forward(&h, &temb)?;
            }
            skips.push(h.clone());
            if level + 1 < levels {
                h = h.avgpool2x()?;
            }
        }

        h = self.mid.forward(&h, &temb)?;

        for level in (0..levels).rev() {
            h = concat_channels(&h, &skips[level])?;
            for block in &self.dec[level] {
                h = block.forward(&h, &temb)?;
            }
            if level > 0 {
                h = h.upsample2x()?;
            }
        }

        let h = self.head_norm.forward(&h)?.silu();
        self.head_conv.forward(&h)
    }

    /// Parameters with their stable names, in declaration order.
    pub fn named_params(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        self.time_fc1.collect("time.fc1", &mut out);
        self.time_fc2.collect("time.fc2", &mut out);
        self.stem.collect("stem", &mut out);
        for (i, blocks) in self.enc.iter().enumerate() {
            for (j, block) in blocks.iter().enumerate() {
                block.collect(&format!("enc{i}.block{j}"), &mut out);
            }
        }
        self.mid.collect("mid", &mut out);
        for (i, blocks) in self.dec.iter().enumerate() {
            for (j, block) in blocks.iter().enumerate() {
                block.collect(&format!("dec{i}.block{j}"), &mut out);
            }
        }
        self.head_norm.collect("head.norm", &mut out);
        self.head_conv.collect("head.conv", &mut out);
        out
    }

    pub fn params(&self) -> Vec<Tensor<E>> {
        self.named_params().into_iter().map(|(_, p)| p).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for p in self.params() {
            p.zero_grad();
        }
    }

    /// Overwrite every parameter (including the zero-initialized head) with
    /// small uniform noise. Diagnostic helper for wiring tests on nets that
    /// have not been trained.
    pub fn randomize_parameters(&self, rng: &mut Rng) {
        for (_, p) in self.named_params() {
            let data: Vec<E> = (0..p.numel())
                .map(|_| E::from_f64(rng.uniform_in(-0.2, 0.2)))
                .collect();
            p.set_data(&data).expect("parameters are leaves");
        }
    }
}
