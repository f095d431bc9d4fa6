//! Quantitative evaluation of generated pairs: mask/image agreement, a
//! Fréchet distance over hand-crafted image features, and mask diversity.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::imgutil::gaussian_blur;
use crate::tensor::Tensor;

/// Feature extractor version; bump whenever the feature definition changes
/// so reports stay comparable only within a version.
pub const FEATURE_VERSION: u32 = 1;

/// Report format version.
pub const REPORT_VERSION: u32 = 1;

/// Parameters of the bright-anomaly extractor used by [`pair_consistency`].
#[derive(Debug, Clone, Copy)]
pub struct EvalConfig {
    /// The dataset's configured contrast offset; detection thresholds at
    /// half this value.
    pub contrast_offset: f64,
    /// Background-smoothing sigma (px) for the local-excess statistic.
    pub blur_sigma: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            contrast_offset: 0.25,
            blur_sigma: 4.0,
        }
    }
}

/// Result of one mask/image consistency measurement.
#[derive(Debug, Clone, Copy)]
pub struct PairScore {
    pub iou: f64,
    /// The mask had no positive pixel; the score is defined as 0.
    pub empty_mask: bool,
}

/// Intersection-over-union between the binarized mask and the image's
/// bright-anomaly region (local intensity excess over a smoothed background
/// thresholded at half the configured contrast offset). The excess statistic
/// is invariant to image-wide constant shifts.
pub fn pair_consistency(
    mask: &Tensor<f32>,
    image: &Tensor<f32>,
    cfg: &EvalConfig,
) -> Result<PairScore> {
    let (mh, mw, mask_data) = mask.as_plane()?;
    let (ih, iw, image_data) = image.as_plane()?;
    if (mh, mw) != (ih, iw) {
        return Err(Error::contract(format!(
            "pair_consistency: mask {mh}x{mw} vs image {ih}x{iw}"
        )));
    }
    let mask_bits: Vec<bool> = mask_data.iter().map(|&v| v > 0.0).collect();
    if !mask_bits.iter().any(|&b| b) {
        return Ok(PairScore {
            iou: 0.0,
            empty_mask: true,
        });
    }
    let img: Vec<f64> = image_data.iter().map(|&v| v as f64).collect();
    let smoothed = gaussian_blur(&img, ih, iw, cfg.blur_sigma);
    let threshold = cfg.contrast_offset / 2.0;
    let detected: Vec<bool> = img
        .iter()
        .zip(&smoothed)
        .map(|(&v, &s)| v - s >= threshold)
        .collect();
    Ok(PairScore {
        iou: iou_bits(&mask_bits, &detected),
        empty_mask: false,
    })
}

fn iou_bits(a: &[bool], b: &[bool]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        // Both empty: identical supports.
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Fixed per-image feature vector: 4x4 block means plus the first four
/// moments of the intensity distribution (mean, std, skewness, kurtosis).
fn features(image: &Tensor<f32>) -> Result<Vec<f64>> {
    let (h, w, data) = image.as_plane()?;
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::contract(format!(
            "feature grid needs sizes divisible by 4, got {h}x{w}"
        )));
    }
    let (bh, bw) = (h / 4, w / 4);
    let mut out = Vec::with_capacity(20);
    for by in 0..4 {
        for bx in 0..4 {
            let mut acc = 0.0f64;
            for r in 0..bh {
                for c in 0..bw {
                    acc += data[(by * bh + r) * w + bx * bw + c] as f64;
                }
            }
            out.push(acc / (bh * bw) as f64);
        }
    }
    let n = (h * w) as f64;
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mut m2 = 0.0;
    let mut m3 = 0.0;
    let mut m4 = 0.0;
    for &v in &data {
        let d = v as f64 - mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let std = m2.sqrt();
    let (skew, kurt) = if std > 1e-12 {
        (m3 / (std * std * std), m4 / (m2 * m2))
    } else {
        (0.0, 0.0)
    };
    out.extend_from_slice(&[mean, std, skew, kurt]);
    Ok(out)
}

fn gaussian_fit(samples: &[Tensor<f32>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = samples.len();
    let feats: Vec<Vec<f64>> = samples.iter().map(features).collect::<Result<_>>()?;
    let dim = feats[0].len();
    let mut mean = DVector::zeros(dim);
    for f in &feats {
        for (i, &v) in f.iter().enumerate() {
            mean[i] += v;
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for f in &feats {
        let d = DVector::from_column_slice(f) - &mean;
        cov += &d * d.transpose();
    }
    cov /= (n - 1).max(1) as f64;
    // Diagonal loading keeps near-singular fits well conditioned.
    for i in 0..dim {
        cov[(i, i)] += 1e-6;
    }
    Ok((mean, cov))
}

/// Square root of a symmetric positive semidefinite matrix via its
/// eigendecomposition; negative eigenvalues from roundoff clamp to zero.
fn spd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = nalgebra::SymmetricEigen::new(m.clone());
    let mut vals = sym.eigenvalues.clone();
    for v in vals.iter_mut() {
        *v = v.max(0.0).sqrt();
    }
    &sym.eigenvectors * DMatrix::from_diagonal(&vals) * sym.eigenvectors.transpose()
}

/// Fréchet (2-Wasserstein between Gaussian fits) distance over the fixed
/// feature vectors of two sample sets. Needs at least 64 samples per set.
pub fn fid_lite(set_a: &[Tensor<f32>], set_b: &[Tensor<f32>]) -> Result<f64> {
    if set_a.len() < 64 || set_b.len() < 64 {
        return Err(Error::contract(format!(
            "fid_lite needs >= 64 samples per set, got {} and {}",
            set_a.len(),
            set_b.len()
        )));
    }
    let (mu_a, cov_a) = gaussian_fit(set_a)?;
    let (mu_b, cov_b) = gaussian_fit(set_b)?;
    let dmu = &mu_a - &mu_b;
    let sqrt_a = spd_sqrt(&cov_a);
    let cross = spd_sqrt(&(&sqrt_a * &cov_b * &sqrt_a));
    let d2 = dmu.dot(&dmu) + cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
    Ok(d2.max(0.0).sqrt())
}

/// Mean pairwise `1 - IoU` over all unordered mask pairs. Two empty masks
/// count as identical (distance 0).
pub fn diversity(masks: &[Tensor<f32>]) -> Result<f64> {
    if masks.len() < 2 {
        return Err(Error::contract("diversity needs at least 2 masks"));
    }
    let bits: Vec<Vec<bool>> = masks
        .iter()
        .map(|m| Ok(m.as_plane()?.2.iter().map(|&v| v > 0.0).collect()))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..bits.len() {
        for j in i + 1..bits.len() {
            if bits[i].len() != bits[j].len() {
                return Err(Error::contract("diversity: mask sizes differ"));
            }
            total += 1.0 - iou_bits(&bits[i], &bits[j]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Aggregated metrics for one evaluation run.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub pair_iou_mean: f64,
    pub pair_iou_sd: f64,
    pub fid_lite: f64,
    pub diversity: f64,
    pub sample_count: usize,
    pub empty_masks: usize,
    pub config_hash: String,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let iou_ok = (0.0..=1.0).contains(&self.pair_iou_mean)
            && (0.0..=1.0).contains(&self.diversity);
        if !iou_ok || self.fid_lite < 0.0 || !self.fid_lite.is_finite() {
            return Err(Error::numeric(format!("metric out of range: {self:?}")));
        }
        Ok(())
    }

    /// Flat `key = value` listing plus one machine-readable line per metric.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "report_version = {REPORT_VERSION}");
        let _ = writeln!(s, "feature_version = {FEATURE_VERSION}");
        let _ = writeln!(s, "config_hash = {}", self.config_hash);
        let _ = writeln!(s, "sample_count = {}", self.sample_count);
        let _ = writeln!(s, "empty_masks = {}", self.empty_masks);
        let _ = writeln!(s, "pair_iou_mean = {}", self.pair_iou_mean);
        let _ = writeln!(s, "pair_iou_sd = {}", self.pair_iou_sd);
        let _ = writeln!(s, "fid_lite = {}", self.fid_lite);
        let _ = writeln!(s, "diversity = {}", self.diversity);
        let _ = writeln!(s, "metric pair_iou_mean {}", self.pair_iou_mean);
        let _ = writeln!(s, "metric fid_lite {}", self.fid_lite);
        let _ = writeln!(s, "metric diversity {}", self.diversity);
        s
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        self.validate()?;
        std::fs::write(path, self.render())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{PairedDataset, SyntheticSpec};
    use crate::rng::Rng;

    fn dataset(count: usize, seed: u64) -> PairedDataset {
        let spec = SyntheticSpec {
            count,
            seed,
            ..SyntheticSpec::default_16()
        };
        PairedDataset::generate_in_memory(&spec).unwrap()
    }

    fn images_of(ds: &PairedDataset) -> Vec<Tensor<f32>> {
        (0..ds.len()).map(|i| ds.get(i).unwrap().1).collect()
    }

    fn masks_of(ds: &PairedDataset) -> Vec<Tensor<f32>> {
        (0..ds.len()).map(|i| ds.get(i).unwrap().0).collect()
    }

    #[test]
    fn extractor_recovers_ground_truth_lesions() {
        // Calibration oracle: on real synthetic pairs the extractor should
        // agree strongly with the ground-truth mask.
        let ds = dataset(64, 3);
        let cfg = EvalConfig::default();
        let mut total = 0.0;
        for i in 0..ds.len() {
            let (mask, image) = ds.get(i).unwrap();
            let score = pair_consistency(&mask, &image, &cfg).unwrap();
            assert!(!score.empty_mask);
            total += score.iou;
        }
        let mean = total / ds.len() as f64;
        assert!(mean >= 0.7, "extractor calibration: mean IoU {mean}");
    }

    #[test]
    fn all_negative_mask_scores_zero_and_flags() {
        let ds = dataset(1, 4);
        let (_, image) = ds.get(0).unwrap();
        let empty = Tensor::from_vec(&[1, 1, 16, 16], vec![-1.0f32; 256]).unwrap();
        let score = pair_consistency(&empty, &image, &EvalConfig::default()).unwrap();
        assert_eq!(score.iou, 0.0);
        assert!(score.empty_mask);
    }

    #[test]
    fn full_contrast_rendering_of_the_mask_scores_near_one() {
        // Image equal to the mask rendered at full contrast: the extractor
        // should recover the support almost exactly (blur tolerance only).
        let ds = dataset(8, 5);
        let cfg = EvalConfig {
            contrast_offset: 0.5,
            ..EvalConfig::default()
        };
        for i in 0..ds.len() {
            let (mask, _) = ds.get(i).unwrap();
            let rendered_data: Vec<f32> = mask
                .to_vec()
                .iter()
                .map(|&v| if v > 0.0 { 0.5 } else { 0.0 })
                .collect();
            let rendered = Tensor::from_vec(&[1, 1, 16, 16], rendered_data).unwrap();
            let score = pair_consistency(&mask, &rendered, &cfg).unwrap();
            assert!(score.iou >= 0.95, "sample {i}: IoU {}", score.iou);
        }
    }

    #[test]
    fn consistency_is_invariant_to_constant_shifts() {
        let ds = dataset(4, 6);
        let cfg = EvalConfig::default();
        for i in 0..ds.len() {
            let (mask, image) = ds.get(i).unwrap();
            let base = pair_consistency(&mask, &image, &cfg).unwrap().iou;
            for shift in [-0.1, -0.03, 0.05, 0.1] {
                let shifted = image.affine(1.0, shift);
                let got = pair_consistency(&mask, &shifted, &cfg).unwrap().iou;
                assert_eq!(got, base, "shift {shift}");
            }
        }
    }

    #[test]
    fn fid_lite_is_zero_on_identical_sets_and_symmetric() {
        let ds = dataset(64, 7);
        let imgs = images_of(&ds);
        let d0 = fid_lite(&imgs, &imgs).unwrap();
        assert!(d0.abs() < 1e-9, "self distance {d0}");

        let other = images_of(&dataset(64, 8));
        let ab = fid_lite(&imgs, &other).unwrap();
        let ba = fid_lite(&other, &imgs).unwrap();
        assert!((ab - ba).abs() < 1e-9, "{ab} vs {ba}");
        assert!(fid_lite(&imgs[..10], &other).is_err(), "minimum set size");
    }

    /// Distance between two disjoint 512-sample halves of the same dataset,
    /// pinned once as the self-distance regression baseline.
    const FID_SELF_BASELINE: f64 = 0.11516861366724324;

    #[test]
    fn fid_lite_self_distance_baseline_is_pinned() {
        let ds = dataset(1024, 11);
        let imgs = images_of(&ds);
        let (a, b) = imgs.split_at(512);
        let d = fid_lite(a, b).unwrap();
        assert!(
            (d - FID_SELF_BASELINE).abs() <= 1e-6 * FID_SELF_BASELINE.max(1e-12),
            "baseline drifted: {d} vs {FID_SELF_BASELINE}"
        );
    }

    #[test]
    fn fid_lite_separates_noise_from_data_by_10x() {
        let ds = dataset(1024, 11);
        let imgs = images_of(&ds);
        let (a, b) = imgs.split_at(512);
        let baseline = fid_lite(a, b).unwrap();
        let mut rng = Rng::new(999);
        let noise: Vec<Tensor<f32>> = (0..512)
            .map(|_| Tensor::<f32>::randn(&[1, 1, 16, 16], &mut rng).clamp(-1.0, 1.0))
            .collect();
        let d = fid_lite(a, &noise).unwrap();
        assert!(
            d >= 10.0 * baseline,
            "noise distance {d} vs baseline {baseline}"
        );
    }

    #[test]
    fn fid_lite_grows_with_perturbation_amplitude() {
        let ds = dataset(256, 13);
        let imgs = images_of(&ds);
        let (a, b) = imgs.split_at(128);
        let mut last = -1.0;
        for amplitude in [0.05, 0.15, 0.45] {
            let mut rng = Rng::new(1000);
            let noisy: Vec<Tensor<f32>> = b
                .iter()
                .map(|t| {
                    let noise = Tensor::<f32>::randn(&[1, 1, 16, 16], &mut rng);
                    Tensor::affine_pair(t, 1.0, &noise, amplitude).unwrap()
                })
                .collect();
            let d = fid_lite(a, &noisy).unwrap();
            assert!(d >= last, "distance must not decrease: {last} -> {d}");
            last = d;
        }
    }

    #[test]
    fn diversity_edge_cases() {
        let all_same: Vec<Tensor<f32>> = (0..4)
            .map(|_| {
                Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f32, -1.0, -1.0, 1.0]).unwrap()
            })
            .collect();
        assert_eq!(diversity(&all_same).unwrap(), 0.0);

        let disjoint = vec![
            Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f32, -1.0, -1.0, -1.0]).unwrap(),
            Tensor::from_vec(&[1, 1, 2, 2], vec![-1.0f32, 1.0, -1.0, -1.0]).unwrap(),
        ];
        assert_eq!(diversity(&disjoint).unwrap(), 1.0);

        assert!(diversity(&disjoint[..1]).is_err());
    }

    /// Mean pairwise mask distance of the first 256 training masks, pinned
    /// once as the dataset diversity baseline.
    const DIVERSITY_BASELINE: f64 = 0.7675108526680503;

    #[test]
    fn training_mask_diversity_baseline_is_pinned() {
        let ds = dataset(256, 11);
        let d = diversity(&masks_of(&ds)).unwrap();
        assert!(
            (d - DIVERSITY_BASELINE).abs() <= 1e-6 * DIVERSITY_BASELINE,
            "baseline drifted: {d} vs {DIVERSITY_BASELINE}"
        );
    }

    #[test]
    fn report_renders_and_validates() {
        let report = EvalReport {
            pair_iou_mean: 0.8,
            pair_iou_sd: 0.05,
            fid_lite: 0.4,
            diversity: 0.9,
            sample_count: 64,
            empty_masks: 0,
            config_hash: "abcd".into(),
        };
        report.validate().unwrap();
        let text = report.render();
        assert!(text.contains("metric fid_lite 0.4"));
        assert!(text.contains("pair_iou_mean = 0.8"));

        let bad = EvalReport {
            pair_iou_mean: 1.4,
            ..report
        };
        assert!(bad.validate().is_err());
    }
}
