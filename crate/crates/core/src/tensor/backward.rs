//! Reverse-mode differentiation over the recorded tape.

use std::collections::HashMap;

use rayon::prelude::*;

use super::gemm::{col2im, gemm_a_bt, gemm_at_b, im2col};
use super::{parallel, Op, Scalar, Tensor};
use crate::error::{Error, Result};

impl<E: Scalar> Tensor<E> {
    /// Propagate `d loss / d tensor` to every tensor on the tape that
    /// requires gradients, accumulating into each tensor's grad buffer.
    /// Repeated calls accumulate; reset with [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::contract(
                "backward on a loss that depends on no gradient-requiring tensor",
            ));
        }

        // Post-order over the requires_grad subgraph: parents before children.
        let mut order: Vec<Tensor<E>> = Vec::new();
        let mut seen: HashMap<u64, ()> = HashMap::new();
        enum Visit<E: Scalar> {
            Enter(Tensor<E>),
            Exit(Tensor<E>),
        }
        let mut stack = vec![Visit::Enter(self.clone())];
        while let Some(v) = stack.pop() {
            match v {
                Visit::Enter(t) => {
                    if seen.contains_key(&t.id()) {
                        continue;
                    }
                    seen.insert(t.id(), ());
                    let parents: Vec<Tensor<E>> = t
                        .op()
                        .parents()
                        .into_iter()
                        .filter(|p| p.requires_grad() && !seen.contains_key(&p.id()))
                        .cloned()
                        .collect();
                    stack.push(Visit::Exit(t));
                    for p in parents {
                        stack.push(Visit::Enter(p));
                    }
                }
                Visit::Exit(t) => order.push(t),
            }
        }

        let mut grads: HashMap<u64, Vec<E>> = HashMap::new();
        grads.insert(self.id(), vec![E::one()]);

        for t in order.iter().rev() {
            let Some(gout) = grads.get(&t.id()).cloned() else {
                continue;
            };
            propagate(t, &gout, &mut grads);
        }

        for t in &order {
            if let Some(g) = grads.get(&t.id()) {
                t.accumulate_grad(g);
            }
        }
        Ok(())
    }
}

fn entry<'m, E: Scalar>(
    grads: &'m mut HashMap<u64, Vec<E>>,
    t: &Tensor<E>,
) -> Option<&'m mut Vec<E>> {
    if !t.requires_grad() {
        return None;
    }
    Some(
        grads
            .entry(t.id())
            .or_insert_with(|| vec![E::zero(); t.numel()]),
    )
}

fn axpy<E: Scalar>(dst: &mut [E], src: &[E], factor: E) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + factor * *s;
    }
}

fn propagate<E: Scalar>(t: &Tensor<E>, gout: &[E], grads: &mut HashMap<u64, Vec<E>>) {
    match t.op() {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(ga) = entry(grads, a) {
                axpy(ga, gout, E::one());
            }
            if let Some(gb) = entry(grads, b) {
                axpy(gb, gout, E::one());
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = entry(grads, a) {
                axpy(ga, gout, E::one());
            }
            if let Some(gb) = entry(grads, b) {
                axpy(gb, gout, -E::one());
            }
        }
        Op::Mul(a, b) => {
            if a.requires_grad() {
                let bd = b.data();
                let ga = entry(grads, a).unwrap();
                for ((g, &go), &bv) in ga.iter_mut().zip(gout).zip(bd.iter()) {
                    *g = *g + go * bv;
                }
            }
            if b.requires_grad() {
                let ad = a.data();
                let gb = entry(grads, b).unwrap();
                for ((g, &go), &av) in gb.iter_mut().zip(gout).zip(ad.iter()) {
                    *g = *g + go * av;
                }
            }
        }
        Op::Neg(a) => {
            if let Some(ga) = entry(grads, a) {
                axpy(ga, gout, -E::one());
            }
        }
        Op::Scale(a, factor) => {
            let f = *factor;
            if let Some(ga) = entry(grads, a) {
                axpy(ga, gout, f);
            }
        }
        Op::AddScalar(a) => {
            if let Some(ga) = entry(grads, a) {
                axpy(ga, gout, E::one());
            }
        }
        Op::Silu(a) => {
            if a.requires_grad() {
                let ad = a.data();
                let one = E::one();
                let ga = entry(grads, a).unwrap();
                for ((g, &go), &x) in ga.iter_mut().zip(gout).zip(ad.iter()) {
                    let sig = one / (one + (-x).exp());
                    *g = *g + go * sig * (one + x * (one - sig));
                }
            }
        }
        Op::Sum(a) => {
            let go = gout[0];
            if let Some(ga) = entry(grads, a) {
                for g in ga.iter_mut() {
                    *g = *g + go;
                }
            }
        }
        Op::Mean(a) => {
            let go = gout[0] * E::from_f64(1.0 / a.numel().max(1) as f64);
            if let Some(ga) = entry(grads, a) {
                for g in ga.iter_mut() {
                    *g = *g + go;
                }
            }
        }
        Op::Mse(a, b) => {
            let factor = gout[0] * E::from_f64(2.0 / a.numel().max(1) as f64);
            let diff: Vec<E> = {
                let ad = a.data();
                let bd = b.data();
                ad.iter().zip(bd.iter()).map(|(&x, &y)| x - y).collect()
            };
            if let Some(ga) = entry(grads, a) {
                axpy(ga, &diff, factor);
            }
            if let Some(gb) = entry(grads, b) {
                axpy(gb, &diff, -factor);
            }
        }
        Op::Conv2d {
            input,
            kernel,
            stride,
            padding,
        } => conv2d_backward(input, kernel, *stride, *padding, t, gout, grads),
        Op::AddBias(a, bias) => {
            if let Some(ga) = entry(grads, a) {
                axpy(ga, gout, E::one());
            }
            if bias.requires_grad() {
                let [b, c, h, w] = *a.shape() else {
                    unreachable!()
                };
                let plane = h * w;
                let gb = entry(grads, bias).unwrap();
                for bi in 0..b {
                    for (ci, gq) in gb.iter_mut().enumerate() {
                        let off = (bi * c + ci) * plane;
                        let mut acc = E::zero();
                        for &g in &gout[off..off + plane] {
                            acc = acc + g;
                        }
                        *gq = *gq + acc;
                    }
                }
            }
        }
        Op::Linear {
            input,
            weight,
            bias,
        } => {
            let din = input.numel();
            let dout = bias.numel();
            if input.requires_grad() {
                let wd = weight.data();
                let gi = entry(grads, input).unwrap();
                for o in 0..dout {
                    let go = gout[o];
                    let row = &wd[o * din..(o + 1) * din];
                    for i in 0..din {
                        gi[i] = gi[i] + go * row[i];
                    }
                }
            }
            if weight.requires_grad() {
                let xd = input.data();
                let gw = entry(grads, weight).unwrap();
                for o in 0..dout {
                    let go = gout[o];
                    let row = &mut gw[o * din..(o + 1) * din];
                    for i in 0..din {
                        row[i] = row[i] + go * xd[i];
                    }
                }
            }
            if let Some(gb) = entry(grads, bias) {
                axpy(gb, gout, E::one());
            }
        }
        Op::GroupNorm {
            input,
            gamma,
            beta,
            groups,
            stats,
        } => group_norm_backward(input, gamma, beta, *groups, stats, gout, grads),
        Op::Upsample2x(a) => {
            if a.requires_grad() {
                let [b, c, h, w] = *a.shape() else {
                    unreachable!()
                };
                let (oh, ow) = (2 * h, 2 * w);
                let ga = entry(grads, a).unwrap();
                for img in 0..b * c {
                    let src = &gout[img * oh * ow..(img + 1) * oh * ow];
                    let dst = &mut ga[img * h * w..(img + 1) * h * w];
                    for i in 0..oh {
                        for j in 0..ow {
                            dst[(i / 2) * w + j / 2] = dst[(i / 2) * w + j / 2] + src[i * ow + j];
                        }
                    }
                }
            }
        }
        Op::AvgPool2x(a) => {
            if a.requires_grad() {
                let [b, c, h, w] = *a.shape() else {
                    unreachable!()
                };
                let (oh, ow) = (h / 2, w / 2);
                let quarter = E::from_f64(0.25);
                let ga = entry(grads, a).unwrap();
                for img in 0..b * c {
                    let src = &gout[img * oh * ow..(img + 1) * oh * ow];
                    let dst = &mut ga[img * h * w..(img + 1) * h * w];
                    for i in 0..oh {
                        for j in 0..ow {
                            let g = src[i * ow + j] * quarter;
                            dst[2 * i * w + 2 * j] = dst[2 * i * w + 2 * j] + g;
                            dst[2 * i * w + 2 * j + 1] = dst[2 * i * w + 2 * j + 1] + g;
                            dst[(2 * i + 1) * w + 2 * j] = dst[(2 * i + 1) * w + 2 * j] + g;
                            dst[(2 * i + 1) * w + 2 * j + 1] =
                                dst[(2 * i + 1) * w + 2 * j + 1] + g;
                        }
                    }
                }
            }
        }
        Op::ConcatChannels(a, b) => {
            let [bs, ca, h, w] = *a.shape() else {
                unreachable!()
            };
            let cb = b.shape()[1];
            let plane = h * w;
            if let Some(ga) = entry(grads, a) {
                for bi in 0..bs {
                    let src = &gout[bi * (ca + cb) * plane..bi * (ca + cb) * plane + ca * plane];
                    axpy(&mut ga[bi * ca * plane..(bi + 1) * ca * plane], src, E::one());
                }
            }
            if let Some(gb) = entry(grads, b) {
                for bi in 0..bs {
                    let off = bi * (ca + cb) * plane + ca * plane;
                    let src = &gout[off..off + cb * plane];
                    axpy(&mut gb[bi * cb * plane..(bi + 1) * cb * plane], src, E::one());
                }
            }
        }
        Op::SliceChannels { input, start } => {
            if input.requires_grad() {
                let [bs, c, h, w] = *input.shape() else {
                    unreachable!()
                };
                let len = t.shape()[1];
                let plane = h * w;
                let gi = entry(grads, input).unwrap();
                for bi in 0..bs {
                    let dst_off = (bi * c + start) * plane;
                    let src = &gout[bi * len * plane..(bi + 1) * len * plane];
                    axpy(&mut gi[dst_off..dst_off + len * plane], src, E::one());
                }
            }
        }
    }
}

fn conv2d_backward<E: Scalar>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    stride: usize,
    padding: usize,
    out: &Tensor<E>,
    gout: &[E],
    grads: &mut HashMap<u64, Vec<E>>,
) {
    let [b, cin, h, w] = *input.shape() else {
        unreachable!()
    };
    let [cout, _, k, _] = *kernel.shape() else {
        unreachable!()
    };
    let [_, _, out_h, out_w] = *out.shape() else {
        unreachable!()
    };
    let k_rows = cin * k * k;
    let plane = out_h * out_w;
    let in_sample = cin * h * w;

    let input_guard = input.data();
    let kernel_guard = kernel.data();
    let input_data: &[E] = &input_guard;
    let kernel_data: &[E] = &kernel_guard;
    let want_input = input.requires_grad();
    let want_kernel = kernel.requires_grad();

    // Per-sample partials; the kernel gradient is reduced serially in batch
    // order afterwards so the result is independent of scheduling.
    let compute = |bi: usize| -> (Option<Vec<E>>, Option<Vec<E>>) {
        let gout_b = &gout[bi * cout * plane..(bi + 1) * cout * plane];
        let mut cols = vec![E::zero(); k_rows * plane];
        im2col(
            &input_data[bi * in_sample..(bi + 1) * in_sample],
            cin,
            h,
            w,
            k,
            stride,
            padding,
            out_h,
            out_w,
            &mut cols,
        );
        let gw = want_kernel.then(|| {
            let mut gw = vec![E::zero(); cout * k_rows];
            gemm_a_bt(gout_b, &cols, &mut gw, cout, k_rows, plane);
            gw
        });
        let gi = want_input.then(|| {
            let mut gcols = vec![E::zero(); k_rows * plane];
            gemm_at_b(kernel_data, gout_b, &mut gcols, k_rows, plane, cout);
            let mut gi = vec![E::zero(); in_sample];
            col2im(&gcols, cin, h, w, k, stride, padding, out_h, out_w, &mut gi);
            gi
        });
        (gw, gi)
    };

    let partials: Vec<(Option<Vec<E>>, Option<Vec<E>>)> =
        if parallel::threads() > 1 && b > 1 {
            parallel::install(|| (0..b).into_par_iter().map(compute).collect())
        } else {
            (0..b).map(compute).collect()
        };

    drop(input_guard);
    drop(kernel_guard);

    if want_kernel {
        let gk = entry(grads, kernel).unwrap();
        for (gw, _) in &partials {
            axpy(gk, gw.as_ref().unwrap(), E::one());
        }
    }
    if want_input {
        let gi = entry(grads, input).unwrap();
        for (bi, (_, gin)) in partials.iter().enumerate() {
            axpy(
                &mut gi[bi * in_sample..(bi + 1) * in_sample],
                gin.as_ref().unwrap(),
                E::one(),
            );
        }
    }
}

fn group_norm_backward<E: Scalar>(
    input: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    groups: usize,
    stats: &[(E, E)],
    gout: &[E],
    grads: &mut HashMap<u64, Vec<E>>,
) {
    let [b, c, h, w] = *input.shape() else {
        unreachable!()
    };
    let group_ch = c / groups;
    let plane = h * w;
    let group_len = group_ch * plane;
    let m = group_len as f64;
    let x = input.data();
    let gd = gamma.data();

    let mut gi_buf = input
        .requires_grad()
        .then(|| vec![E::zero(); input.numel()]);
    let mut gg_buf = gamma.requires_grad().then(|| vec![E::zero(); c]);
    let mut gb_buf = beta.requires_grad().then(|| vec![E::zero(); c]);

    for bi in 0..b {
        for gi in 0..groups {
            let base = bi * c * plane + gi * group_len;
            let (mean, inv_std) = stats[bi * groups + gi];
            let (mean, inv_std) = (mean.to_f64(), inv_std.to_f64());

            // Per-group reductions of gamma * gout and its product with xhat.
            let mut sum_dxhat = 0.0f64;
            let mut sum_dxhat_xhat = 0.0f64;
            for local_c in 0..group_ch {
                let ch = gi * group_ch + local_c;
                let g = gd[ch].to_f64();
                let off = base + local_c * plane;
                for j in 0..plane {
                    let go = gout[off + j].to_f64();
                    let xhat = (x[off + j].to_f64() - mean) * inv_std;
                    sum_dxhat += go * g;
                    sum_dxhat_xhat += go * g * xhat;
                }
            }

            for local_c in 0..group_ch {
                let ch = gi * group_ch + local_c;
                let g = gd[ch].to_f64();
                let off = base + local_c * plane;
                let mut dgamma = 0.0f64;
                let mut dbeta = 0.0f64;
                for j in 0..plane {
                    let go = gout[off + j].to_f64();
                    let xhat = (x[off + j].to_f64() - mean) * inv_std;
                    if let Some(gi_buf) = gi_buf.as_mut() {
                        let dx = inv_std
                            * (go * g - sum_dxhat / m - xhat * sum_dxhat_xhat / m);
                        gi_buf[off + j] = gi_buf[off + j] + E::from_f64(dx);
                    }
                    dgamma += go * xhat;
                    dbeta += go;
                }
                if let Some(gg) = gg_buf.as_mut() {
                    gg[ch] = gg[ch] + E::from_f64(dgamma);
                }
                if let Some(gb) = gb_buf.as_mut() {
                    gb[ch] = gb[ch] + E::from_f64(dbeta);
                }
            }
        }
    }
    drop(x);
    drop(gd);

    if let Some(buf) = gi_buf {
        if let Some(gi) = entry(grads, input) {
            axpy(gi, &buf, E::one());
        }
    }
    if let Some(buf) = gg_buf {
        if let Some(gg) = entry(grads, gamma) {
            axpy(gg, &buf, E::one());
        }
    }
    if let Some(buf) = gb_buf {
        if let Some(gb) = entry(grads, beta) {
            axpy(gb, &buf, E::one());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn quadratic_at_its_minimum_has_zero_grads() {
        let a = Tensor::<f64>::param(&[4], vec![0.3, -0.7, 1.1, 0.0]).unwrap();
        let b = Tensor::<f64>::from_vec(&[4], vec![0.3, -0.7, 1.1, 0.0]).unwrap();
        let loss = a.sub(&b).unwrap();
        let loss = loss.mul(&loss).unwrap().mean();
        loss.backward().unwrap();
        assert!(a.grad().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn linear_loss_has_constant_grads() {
        let a = Tensor::<f64>::param(&[2, 3], vec![0.5; 6]).unwrap();
        let loss = a.scale(2.0).sum();
        loss.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![2.0; 6]);
    }

    #[test]
    fn repeated_backward_accumulates_until_reset() {
        let a = Tensor::<f64>::param(&[2], vec![1.0, 2.0]).unwrap();
        let loss = a.sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![2.0, 2.0]);
        a.zero_grad();
        loss.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn shared_operand_grads_sum_over_uses() {
        // c = a * a: grad(a) = 2a.
        let a = Tensor::<f64>::param(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let loss = a.mul(&a).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached_losses() {
        let a = Tensor::<f64>::param(&[2], vec![1.0, 2.0]).unwrap();
        assert!(a.scale(1.0).backward().is_err(), "non-scalar");
        let detached = Tensor::<f64>::from_vec(&[1], vec![3.0]).unwrap();
        assert!(detached.sum().backward().is_err(), "no grad path");
    }

    #[test]
    fn mse_gradient_matches_closed_form() {
        let a = Tensor::<f64>::param(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::from_vec(&[4], vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let loss = a.mse(&b).unwrap();
        loss.backward().unwrap();
        // d/da mean((a-b)^2) = 2 (a - b) / n
        let want: Vec<f64> = a.data().iter().map(|&v| 2.0 * v / 4.0).collect();
        assert_eq!(a.grad().unwrap(), want);
    }

    #[test]
    fn three_layer_conv_net_grads_match_finite_differences() {
        // Small end-to-end check; the acceptance suite runs the full sweep.
        let mut rng = Rng::new(8);
        let x = Tensor::<f64>::randn(&[1, 2, 6, 6], &mut rng);
        let k1 = Tensor::<f64>::randn(&[3, 2, 3, 3], &mut rng)
            .scale(0.4)
            .detach()
            .set_requires_grad()
            .unwrap();
        let k2 = Tensor::<f64>::randn(&[3, 3, 3, 3], &mut rng)
            .scale(0.4)
            .detach()
            .set_requires_grad()
            .unwrap();
        let k3 = Tensor::<f64>::randn(&[1, 3, 3, 3], &mut rng)
            .scale(0.4)
            .detach()
            .set_requires_grad()
            .unwrap();
        let target = Tensor::<f64>::randn(&[1, 1, 6, 6], &mut rng);

        let run = || -> f64 {
            let h = x.conv2d(&k1, 1, 1).unwrap().silu();
            let h = h.conv2d(&k2, 1, 1).unwrap().silu();
            let out = h.conv2d(&k3, 1, 1).unwrap();
            out.mse(&target).unwrap().item().unwrap()
        };

        let loss = {
            let h = x.conv2d(&k1, 1, 1).unwrap().silu();
            let h = h.conv2d(&k2, 1, 1).unwrap().silu();
            let out = h.conv2d(&k3, 1, 1).unwrap();
            out.mse(&target).unwrap()
        };
        loss.backward().unwrap();

        let h = 1e-3;
        for (name, param) in [("k1", &k1), ("k2", &k2), ("k3", &k3)] {
            let analytic = param.grad().unwrap();
            let baseline = param.to_vec();
            for i in (0..baseline.len()).step_by(5) {
                let mut plus = baseline.clone();
                plus[i] += h;
                param.set_data(&plus).unwrap();
                let up = run();
                let mut minus = baseline.clone();
                minus[i] -= h;
                param.set_data(&minus).unwrap();
                let down = run();
                param.set_data(&baseline).unwrap();
                let numeric = (up - down) / (2.0 * h);
                let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
                assert!(
                    ((analytic[i] - numeric) / denom).abs() < 1e-5,
                    "{name}[{i}]: analytic {} vs numeric {numeric}",
                    analytic[i]
                );
            }
        }
    }
}
