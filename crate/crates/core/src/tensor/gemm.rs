//! Matrix kernels backing `conv2d` and its backward pass.
//!
//! All kernels accumulate each output element over `k` in ascending order,
//! so results do not depend on how rows are split across threads.

use super::Scalar;

/// C[m,n] += A[m,k] * B[k,n], row-major. Rows are processed in blocks of
/// four so each B row is streamed once per block.
pub fn gemm<E: Scalar>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut rows = c.chunks_exact_mut(n);
    let mut mi = 0;
    while m - mi >= 4 {
        let c0 = rows.next().unwrap();
        let c1 = rows.next().unwrap();
        let c2 = rows.next().unwrap();
        let c3 = rows.next().unwrap();
        for kk in 0..k {
            let a0 = a[mi * k + kk];
            let a1 = a[(mi + 1) * k + kk];
            let a2 = a[(mi + 2) * k + kk];
            let a3 = a[(mi + 3) * k + kk];
            let br = &b[kk * n..kk * n + n];
            for j in 0..n {
                let bj = br[j];
                c0[j] = c0[j] + a0 * bj;
                c1[j] = c1[j] + a1 * bj;
                c2[j] = c2[j] + a2 * bj;
                c3[j] = c3[j] + a3 * bj;
            }
        }
        mi += 4;
    }
    for row in rows {
        for kk in 0..k {
            let av = a[mi * k + kk];
            let br = &b[kk * n..kk * n + n];
            for j in 0..n {
                row[j] = row[j] + av * br[j];
            }
        }
        mi += 1;
    }
}

/// C[m,n] += A[m,k] * B[n,k]^T: each output is a dot product of two rows.
pub fn gemm_a_bt<E: Scalar>(a: &[E], b: &[E], c: &mut [E], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for mi in 0..m {
        let ar = &a[mi * k..mi * k + k];
        let cr = &mut c[mi * n..mi * n + n];
        for (j, cj) in cr.iter_mut().enumerate() {
            let br = &b[j * k..j * k + k];
            let mut acc = E::zero();
            for kk in 0..k {
                acc = acc + ar[kk] * br[kk];
            }
            *cj = *cj + acc;
        }
    }
}

/// C[m,n] += A[k,m]^T * B[k,n].
pub fn gemm_at_b<E: Scalar>(a: &[E], b: &[E], c: &mut [E], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for kk in 0..k {
        let br = &b[kk * n..kk * n + n];
        for mi in 0..m {
            let av = a[kk * m + mi];
            let cr = &mut c[mi * n..mi * n + n];
            for j in 0..n {
                cr[j] = cr[j] + av * br[j];
            }
        }
    }
}

/// Unfold one `[C, H, W]` sample into columns `[C*kh*kw, out_h*out_w]` for
/// cross-correlation with the given stride/padding. Out-of-bounds taps
/// contribute zero.
#[allow(clippy::too_many_arguments)]
pub fn im2col<E: Scalar>(
    input: &[E],
    channels: usize,
    h: usize,
    w: usize,
    ksize: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
    cols: &mut [E],
) {
    debug_assert_eq!(input.len(), channels * h * w);
    debug_assert_eq!(cols.len(), channels * ksize * ksize * out_h * out_w);
    let plane = out_h * out_w;
    for c in 0..channels {
        let in_plane = &input[c * h * w..(c + 1) * h * w];
        for kh in 0..ksize {
            for kw in 0..ksize {
                let row = ((c * ksize + kh) * ksize + kw) * plane;
                for oh in 0..out_h {
                    let ih = (oh * stride + kh) as isize - padding as isize;
                    let dst = &mut cols[row + oh * out_w..row + (oh + 1) * out_w];
                    if ih < 0 || ih >= h as isize {
                        for v in dst.iter_mut() {
                            *v = E::zero();
                        }
                        continue;
                    }
                    let src_row = &in_plane[ih as usize * w..(ih as usize + 1) * w];
                    for (ow, v) in dst.iter_mut().enumerate() {
                        let iw = (ow * stride + kw) as isize - padding as isize;
                        *v = if iw < 0 || iw >= w as isize {
                            E::zero()
                        } else {
                            src_row[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold columns back into a `[C, H, W]` sample, accumulating overlapping
/// taps. Inverse scatter of [`im2col`], used for the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn col2im<E: Scalar>(
    cols: &[E],
    channels: usize,
    h: usize,
    w: usize,
    ksize: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
    output: &mut [E],
) {
    debug_assert_eq!(output.len(), channels * h * w);
    debug_assert_eq!(cols.len(), channels * ksize * ksize * out_h * out_w);
    let plane = out_h * out_w;
    for c in 0..channels {
        let out_plane = &mut output[c * h * w..(c + 1) * h * w];
        for kh in 0..ksize {
            for kw in 0..ksize {
                let row = ((c * ksize + kh) * ksize + kw) * plane;
                for oh in 0..out_h {
                    let ih = (oh * stride + kh) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let src = &cols[row + oh * out_w..row + (oh + 1) * out_w];
                    let dst_row = &mut out_plane[ih as usize * w..(ih as usize + 1) * w];
                    for (ow, &v) in src.iter().enumerate() {
                        let iw = (ow * stride + kw) as isize - padding as isize;
                        if iw >= 0 && iw < w as isize {
                            dst_row[iw as usize] = dst_row[iw as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_small_known() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);

        let mut c_bt = [0.0; 4];
        // B^T of [5 7; 6 8] is [5 6; 7 8]
        let b_t = [5.0, 7.0, 6.0, 8.0];
        gemm_a_bt(&a, &b_t, &mut c_bt, 2, 2, 2);
        assert_eq!(c_bt, c);

        let mut c_at = [0.0; 4];
        // A^T of [1 3; 2 4] is [1 2; 3 4]
        let a_t = [1.0, 3.0, 2.0, 4.0];
        gemm_at_b(&a_t, &b, &mut c_at, 2, 2, 2);
        assert_eq!(c_at, c);
    }

    #[test]
    fn gemm_variants_agree_on_random_sizes() {
        let mut rng = crate::rng::Rng::new(21);
        for &(m, k, n) in &[(1usize, 1usize, 1usize), (5, 7, 9), (8, 3, 16), (6, 11, 4)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.uniform() - 0.5).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.uniform() - 0.5).collect();
            let mut c = vec![0.0; m * n];
            gemm(&a, &b, &mut c, m, k, n);
            // Naive reference.
            let mut r = vec![0.0; m * n];
            for mi in 0..m {
                for kk in 0..k {
                    for j in 0..n {
                        r[mi * n + j] += a[mi * k + kk] * b[kk * n + j];
                    }
                }
            }
            for (x, y) in c.iter().zip(&r) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_inverts_im2col_scatter() {
        // With a 1x1 kernel and stride 1, im2col is the identity and col2im
        // must reproduce the input exactly.
        let input: Vec<f64> = (0..2 * 3 * 3).map(|i| i as f64).collect();
        let mut cols = vec![0.0; input.len()];
        im2col(&input, 2, 3, 3, 1, 1, 0, 3, 3, &mut cols);
        assert_eq!(cols, input);
        let mut back = vec![0.0; input.len()];
        col2im(&cols, 2, 3, 3, 1, 1, 0, 3, 3, &mut back);
        assert_eq!(back, input);
    }
}
