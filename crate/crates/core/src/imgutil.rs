//! Small shared raster helpers (blur, normal CDF) used by the synthetic
//! generator and the evaluation metrics.

/// Separable Gaussian blur with truncated, per-pixel renormalized kernels.
/// Renormalization makes the filter preserve constants exactly, including at
/// the borders.
pub(crate) fn gaussian_blur(data: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    debug_assert_eq!(data.len(), h * w);
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();

    let pass = |src: &[f64], len: usize, count: usize, stride: usize, item: usize| -> Vec<f64> {
        // Blur `count` lines of `len` samples; consecutive samples of a line
        // are `item` apart, consecutive lines `stride` apart.
        let mut out = vec![0.0; src.len()];
        for line in 0..count {
            for i in 0..len {
                let mut acc = 0.0;
                let mut norm = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let j = i as isize + ki as isize - radius;
                    if j < 0 || j >= len as isize {
                        continue;
                    }
                    acc += kv * src[line * stride + j as usize * item];
                    norm += kv;
                }
                out[line * stride + i * item] = acc / norm;
            }
        }
        out
    };

    let rows = pass(data, w, h, w, 1);
    pass(&rows, h, w, 1, w)
}

/// Standard normal CDF via the Abramowitz-Stegun 7.1.26 erf approximation
/// (absolute error < 1.5e-7); plain arithmetic only.
pub(crate) fn normal_cdf(z: f64) -> f64 {
    let x = z / std::f64::consts::SQRT_2;
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let erf = 1.0 - poly * (-x * x).exp();
    0.5 * (1.0 + sign * erf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blur_preserves_constants_exactly() {
        let field = vec![0.37f64; 12 * 12];
        let out = gaussian_blur(&field, 12, 12, 2.5);
        for v in out {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_smooths_an_impulse_symmetrically() {
        // 13x13 keeps the full kernel support of a centered impulse away
        // from the renormalized border region, so mass is preserved.
        let n = 13;
        let mut field = vec![0.0f64; n * n];
        field[6 * n + 6] = 1.0;
        let out = gaussian_blur(&field, n, n, 1.0);
        assert!(out[6 * n + 6] < 1.0);
        assert!((out[6 * n + 5] - out[6 * n + 7]).abs() < 1e-12);
        assert!((out[5 * n + 6] - out[7 * n + 6]).abs() < 1e-12);
        let total: f64 = out.iter().sum();
        assert!((total - 1.0).abs() < 1e-12, "interior mass preserved: {total}");
    }

    #[test]
    fn normal_cdf_matches_known_points() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-7);
        assert!((normal_cdf(1.0) - 0.8413447).abs() < 1e-6);
        assert!((normal_cdf(-1.0) - 0.1586553).abs() < 1e-6);
        assert!(normal_cdf(6.0) > 0.999999);
        assert!(normal_cdf(-6.0) < 1e-6);
    }
}
