//! Forward operations. Every op validates its contract, computes the output,
//! and records itself on the tape. Reductions accumulate in `f64` in a fixed
//! order regardless of element type or thread count.

use rayon::prelude::*;

use super::gemm::{gemm, im2col};
use super::{debug_check_finite, parallel, Op, Scalar, Tensor};
use crate::error::{Error, Result};

pub(crate) const GROUP_NORM_EPS: f64 = 1e-5;

fn same_shape<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn nchw<E: Scalar>(t: &Tensor<E>, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::contract(format!(
            "{what}: expected [B, C, H, W], got {:?}",
            t.shape()
        ))),
    }
}

impl<E: Scalar> Tensor<E> {
    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape(self, other, "add")?;
        let od = other.data();
        let data: Vec<E> = self
            .data()
            .iter()
            .zip(od.iter())
            .map(|(&a, &b)| a + b)
            .collect();
        drop(od);
        debug_check_finite(&data, &[self, other]);
        Ok(Tensor::new(
            self.shape().to_vec(),
            data,
            self.requires_grad() || other.requires_grad(),
            Op::Add(self.clone(), other.clone()),
        ))
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape(self, other, "sub")?;
        let od = other.data();
        let data: Vec<E> = self
            .data()
            .iter()
            .zip(od.iter())
            .map(|(&a, &b)| a - b)
            .collect();
        drop(od);
        debug_check_finite(&data, &[self, other]);
        Ok(Tensor::new(
            self.shape().to_vec(),
            data,
            self.requires_grad() || other.requires_grad(),
            Op::Sub(self.clone(), other.clone()),
        ))
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape(self, other, "mul")?;
        let od = other.data();
        let data: Vec<E> = self
            .data()
            .iter()
            .zip(od.iter())
            .map(|(&a, &b)| a * b)
            .collect();
        drop(od);
        debug_check_finite(&data, &[self, other]);
        Ok(Tensor::new(
            self.shape().to_vec(),
            data,
            self.requires_grad() || other.requires_grad(),
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    pub fn neg(&self) -> Tensor<E> {
        let data: Vec<E> = self.data().iter().map(|&a| -a).collect();
        Tensor::new(
            self.shape().to_vec(),
            data,
            self.requires_grad(),
            Op::Neg(self.clone()),
        )
    }

    pub fn scale(&self, factor: f64) -> Tensor<E> {
        let f = E::from_f64(factor);
        let data: Vec<E> = self.data().iter().map(|&a| a * f).collect();
        debug_check_finite(&data, &[self]);
        Tensor::new(
            self.shape().to_vec(),
            data,
            self.requires_grad(),
            Op::Scale(self.clone(), f),
        )
    }

    pub fn add_scalar(&self, value: f64) -> Tensor<E> {
        let v = E::from_f64(value);
        let data: Vec<E> = self.data().iter().map(|&a| a + v).collect();
        debug_check_finite(&data, &[self]);
        Tensor::new(
            self.shape().to_vec(),
            data,
            self.requires_grad(),
            Op::AddScalar(self.clone()),
        )
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Tensor<E> {
        let one = E::one();
        let data: Vec<E> = self
            .data()
            .iter()
            .map(|&x| x * (one / (one + (-x).exp())))
            .collect();
        debug_check_finite(&data, &[self]);
        Tensor::new(
            self.shape().to_vec(),
            data,
            self.requires_grad(),
            Op::Silu(self.clone()),
        )
    }

    /// Scalar sum over all elements.
    pub fn sum(&self) -> Tensor<E> {
        let total: f64 = self.data().iter().map(|v| v.to_f64()).sum();
        Tensor::new(
            vec![],
            vec![E::from_f64(total)],
            self.requires_grad(),
            Op::Sum(self.clone()),
        )
    }

    /// Scalar mean over all elements.
    pub fn mean(&self) -> Tensor<E> {
        let total: f64 = self.data().iter().map(|v| v.to_f64()).sum();
        let n = self.numel().max(1) as f64;
        Tensor::new(
            vec![],
            vec![E::from_f64(total / n)],
            self.requires_grad(),
            Op::Mean(self.clone()),
        )
    }

    /// Scalar mean squared error against `target`.
    pub fn mse(&self, target: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape(self, target, "mse")?;
        let td = target.data();
        let total: f64 = self
            .data()
            .iter()
            .zip(td.iter())
            .map(|(&a, &b)| {
                let d = a.to_f64() - b.to_f64();
                d * d
            })
            .sum();
        drop(td);
        let n = self.numel().max(1) as f64;
        Ok(Tensor::new(
            vec![],
            vec![E::from_f64(total / n)],
            self.requires_grad() || target.requires_grad(),
            Op::Mse(self.clone(), target.clone()),
        ))
    }

    /// 2-D cross-correlation: input `[B, Cin, H, W]` with kernel
    /// `[Cout, Cin, k, k]` (odd `k`), zero padding.
    pub fn conv2d(&self, kernel: &Tensor<E>, stride: usize, padding: usize) -> Result<Tensor<E>> {
        let (b, cin, h, w) = nchw(self, "conv2d input")?;
        let (cout, kcin, kh, kw) = nchw(kernel, "conv2d kernel")?;
        if kh != kw || kh % 2 == 0 {
            return Err(Error::contract(format!(
                "conv2d: kernel must be square with odd size, got {kh}x{kw}"
            )));
        }
        if kcin != cin {
            return Err(Error::contract(format!(
                "conv2d: input has {cin} channels but kernel expects {kcin}"
            )));
        }
        if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::contract(format!(
                "conv2d: invalid stride/padding for {h}x{w} input with {kh}x{kh} kernel"
            )));
        }
        let out_h = (h + 2 * padding - kh) / stride + 1;
        let out_w = (w + 2 * padding - kw) / stride + 1;
        let k_rows = cin * kh * kw;
        let plane = out_h * out_w;

        let mut out = vec![E::zero(); b * cout * plane];
        {
            let input_guard = self.data();
            let weights_guard = kernel.data();
            let input: &[E] = &input_guard;
            let weights: &[E] = &weights_guard;
            let in_sample = cin * h * w;
            let run = |(bi, out_b): (usize, &mut [E])| {
                let mut cols = vec![E::zero(); k_rows * plane];
                im2col(
                    &input[bi * in_sample..(bi + 1) * in_sample],
                    cin,
                    h,
                    w,
                    kh,
                    stride,
                    padding,
                    out_h,
                    out_w,
                    &mut cols,
                );
                gemm(weights, &cols, out_b, cout, k_rows, plane);
            };
            if parallel::threads() > 1 && b > 1 {
                parallel::install(|| {
                    out.par_chunks_mut(cout * plane).enumerate().for_each(run);
                });
            } else {
                for chunk in out.chunks_mut(cout * plane).enumerate() {
                    run(chunk);
                }
            }
        }
        debug_check_finite(&out, &[self, kernel]);
        Ok(Tensor::new(
            vec![b, cout, out_h, out_w],
            out,
            self.requires_grad() || kernel.requires_grad(),
            Op::Conv2d {
                input: self.clone(),
                kernel: kernel.clone(),
                stride,
                padding,
            },
        ))
    }

    /// Add a per-channel vector `[C]` to a `[B, C, H, W]` map.
    pub fn add_bias(&self, bias: &Tensor<E>) -> Result<Tensor<E>> {
        let (b, c, h, w) = nchw(self, "add_bias input")?;
        if bias.shape() != [c] {
            return Err(Error::contract(format!(
                "add_bias: bias shape {:?} does not match {c} channels",
                bias.shape()
            )));
        }
        let bd = bias.data();
        let mut data = self.to_vec();
        let plane = h * w;
        for bi in 0..b {
            for ci in 0..c {
                let bias_v = bd[ci];
                let off = (bi * c + ci) * plane;
                for v in &mut data[off..off + plane] {
                    *v = *v + bias_v;
                }
            }
        }
        drop(bd);
        debug_check_finite(&data, &[self, bias]);
        Ok(Tensor::new(
            self.shape().to_vec(),
            data,
            self.requires_grad() || bias.requires_grad(),
            Op::AddBias(self.clone(), bias.clone()),
        ))
    }

    /// Affine map of a rank-1 input: `weight [dout, din] * self [din] + bias [dout]`.
    pub fn linear(&self, weight: &Tensor<E>, bias: &Tensor<E>) -> Result<Tensor<E>> {
        let din = match *self.shape() {
            [d] => d,
            _ => {
                return Err(Error::contract(format!(
                    "linear: expected rank-1 input, got {:?}",
                    self.shape()
                )))
            }
        };
        let (dout, wdin) = match *weight.shape() {
            [o, i] => (o, i),
            _ => {
                return Err(Error::contract(format!(
                    "linear: expected [dout, din] weight, got {:?}",
                    weight.shape()
                )))
            }
        };
        if wdin != din || bias.shape() != [dout] {
            return Err(Error::contract(format!(
                "linear: weight {:?} / bias {:?} incompatible with input [{din}]",
                weight.shape(),
                bias.shape()
            )));
        }
        let x = self.data();
        let wd = weight.data();
        let bd = bias.data();
        let data: Vec<E> = (0..dout)
            .map(|o| {
                let row = &wd[o * din..(o + 1) * din];
                let mut acc = E::zero();
                for i in 0..din {
                    acc = acc + row[i] * x[i];
                }
                acc + bd[o]
            })
            .collect();
        drop((x, wd, bd));
        debug_check_finite(&data, &[self, weight, bias]);
        Ok(Tensor::new(
            vec![dout],
            data,
            self.requires_grad() || weight.requires_grad() || bias.requires_grad(),
            Op::Linear {
                input: self.clone(),
                weight: weight.clone(),
                bias: bias.clone(),
            },
        ))
    }

    /// Group normalization over `[B, C, H, W]` with per-channel scale/offset.
    pub fn group_norm(
        &self,
        gamma: &Tensor<E>,
        beta: &Tensor<E>,
        groups: usize,
    ) -> Result<Tensor<E>> {
        let (b, c, h, w) = nchw(self, "group_norm input")?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::contract(format!(
                "group_norm: {c} channels not divisible into {groups} groups"
            )));
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::contract(format!(
                "group_norm: gamma {:?} / beta {:?} must be [{c}]",
                gamma.shape(),
                beta.shape()
            )));
        }
        let group_ch = c / groups;
        let group_len = group_ch * h * w;
        let plane = h * w;
        let x = self.data();
        let gd = gamma.data();
        let bd = beta.data();
        let mut data = vec![E::zero(); x.len()];
        let mut stats = Vec::with_capacity(b * groups);
        for bi in 0..b {
            for gi in 0..groups {
                let base = bi * c * plane + gi * group_len;
                let chunk = &x[base..base + group_len];
                let mean = chunk.iter().map(|v| v.to_f64()).sum::<f64>() / group_len as f64;
                let var = chunk
                    .iter()
                    .map(|v| {
                        let d = v.to_f64() - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / group_len as f64;
                let inv_std = 1.0 / (var + GROUP_NORM_EPS).sqrt();
                stats.push((E::from_f64(mean), E::from_f64(inv_std)));
                let (mean_e, inv_e) = (E::from_f64(mean), E::from_f64(inv_std));
                for local_c in 0..group_ch {
                    let ch = gi * group_ch + local_c;
                    let (g, be) = (gd[ch], bd[ch]);
                    let off = base + local_c * plane;
                    for j in 0..plane {
                        let xhat = (x[off + j] - mean_e) * inv_e;
                        data[off + j] = g * xhat + be;
                    }
                }
            }
        }
        drop((x, gd, bd));
        debug_check_finite(&data, &[self, gamma, beta]);
        Ok(Tensor::new(
            self.shape().to_vec(),
            data,
            self.requires_grad() || gamma.requires_grad() || beta.requires_grad(),
            Op::GroupNorm {
                input: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                groups,
                stats,
            },
        ))
    }

    /// Nearest-neighbor 2x upsample of a `[B, C, H, W]` map.
    pub fn upsample2x(&self) -> Result<Tensor<E>> {
        let (b, c, h, w) = nchw(self, "upsample2x input")?;
        let x = self.data();
        let mut data = vec![E::zero(); b * c * 4 * h * w];
        let (oh, ow) = (2 * h, 2 * w);
        for img in 0..b * c {
            let src = &x[img * h * w..(img + 1) * h * w];
            let dst = &mut data[img * oh * ow..(img + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    dst[i * ow + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        drop(x);
        Ok(Tensor::new(
            vec![b, c, oh, ow],
            data,
            self.requires_grad(),
            Op::Upsample2x(self.clone()),
        ))
    }

    /// 2x average-pool downsample; height and width must be even.
    pub fn avgpool2x(&self) -> Result<Tensor<E>> {
        let (b, c, h, w) = nchw(self, "avgpool2x input")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::contract(format!(
                "avgpool2x: spatial size {h}x{w} must be even"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let quarter = E::from_f64(0.25);
        let x = self.data();
        let mut data = vec![E::zero(); b * c * oh * ow];
        for img in 0..b * c {
            let src = &x[img * h * w..(img + 1) * h * w];
            let dst = &mut data[img * oh * ow..(img + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    let s = src[2 * i * w + 2 * j]
                        + src[2 * i * w + 2 * j + 1]
                        + src[(2 * i + 1) * w + 2 * j]
                        + src[(2 * i + 1) * w + 2 * j + 1];
                    dst[i * ow + j] = s * quarter;
                }
            }
        }
        drop(x);
        Ok(Tensor::new(
            vec![b, c, oh, ow],
            data,
            self.requires_grad(),
            Op::AvgPool2x(self.clone()),
        ))
    }

    /// Keep `len` channels starting at `start`.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor<E>> {
        let (b, c, h, w) = nchw(self, "slice_channels input")?;
        if start + len > c || len == 0 {
            return Err(Error::contract(format!(
                "slice_channels: [{start}, {}) out of {c} channels",
                start + len
            )));
        }
        let plane = h * w;
        let x = self.data();
        let mut data = vec![E::zero(); b * len * plane];
        for bi in 0..b {
            let src = &x[(bi * c + start) * plane..(bi * c + start + len) * plane];
            data[bi * len * plane..(bi + 1) * len * plane].copy_from_slice(src);
        }
        drop(x);
        Ok(Tensor::new(
            vec![b, len, h, w],
            data,
            self.requires_grad(),
            Op::SliceChannels {
                input: self.clone(),
                start,
            },
        ))
    }
}

/// Concatenate along the channel dimension: `[B, Ca, H, W] ++ [B, Cb, H, W]`.
/// The order of arguments is preserved bit-exactly in the output layout.
pub fn concat_channels<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (ba, ca, h, w) = nchw(a, "concat_channels lhs")?;
    let (bb, cb, hb, wb) = nchw(b, "concat_channels rhs")?;
    if ba != bb || h != hb || w != wb {
        return Err(Error::contract(format!(
            "concat_channels: incompatible shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let plane = h * w;
    let ad = a.data();
    let bd = b.data();
    let mut data = vec![E::zero(); ba * (ca + cb) * plane];
    for bi in 0..ba {
        let dst = &mut data[bi * (ca + cb) * plane..(bi + 1) * (ca + cb) * plane];
        dst[..ca * plane].copy_from_slice(&ad[bi * ca * plane..(bi + 1) * ca * plane]);
        dst[ca * plane..].copy_from_slice(&bd[bi * cb * plane..(bi + 1) * cb * plane]);
    }
    drop((ad, bd));
    Ok(Tensor::new(
        vec![ba, ca + cb, h, w],
        data,
        a.requires_grad() || b.requires_grad(),
        Op::ConcatChannels(a.clone(), b.clone()),
    ))
}
