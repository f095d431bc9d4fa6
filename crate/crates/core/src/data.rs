//! Synthetic paired mask/image data, normalization, and image I/O.
//!
//! Each sample is a smoothed-noise background with a few low-contrast bright
//! elliptical lesions added on top, plus the exact binary mask of the lesion
//! support. Lesion edges follow a Gaussian-blurred profile whose
//! half-intensity contour sits a fraction of a pixel outside the mask
//! boundary, so mask-covered pixels carry (nearly) the full contrast offset.
//!
//! On disk: images are 16-bit binary PGM (P5, maxval 65535, most significant
//! byte first) mapping `[-1, 1]` linearly onto `[0, 65535]`; masks are 8-bit
//! PGM with values {0, 255}. A dataset directory holds one
//! `mask<TAB>image` line per sample in `manifest.txt` behind a header
//! carrying the spec hash.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imgutil::{gaussian_blur, normal_cdf};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Parameters of the synthetic paired dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub image_size: usize,
    /// Lesions per image, inclusive range.
    pub lesion_count: (usize, usize),
    /// Ellipse semi-axes in pixels; at least 2.
    pub lesion_radius: (f64, f64),
    /// Added intensity as a fraction of the dynamic range, in (0, 0.5].
    pub contrast: (f64, f64),
    /// Background texture: blur length scale (px) and amplitude (std).
    pub background_scale: f64,
    pub background_amplitude: f64,
    /// Gaussian sigma of the lesion edge profile (px).
    pub edge_softness: f64,
    pub count: usize,
    pub seed: u64,
    /// Permit samples whose mask has no positive pixel (ablations only).
    pub allow_empty: bool,
}

impl SyntheticSpec {
    /// Desk-scale default: 16x16, 1-2 lesions of radius 2-3.5 px at
    /// 0.25-0.45 contrast over a gentle smoothed-noise background.
    pub fn default_16() -> Self {
        SyntheticSpec {
            image_size: 16,
            lesion_count: (1, 2),
            lesion_radius: (2.0, 3.5),
            contrast: (0.25, 0.45),
            background_scale: 3.0,
            background_amplitude: 0.12,
            edge_softness: 0.25,
            count: 2048,
            seed: 0,
            allow_empty: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::config("image size must be at least 8"));
        }
        if self.lesion_count.0 > self.lesion_count.1 {
            return Err(Error::config("lesion count range is inverted"));
        }
        if !self.allow_empty && self.lesion_count.0 < 1 {
            return Err(Error::config(
                "lesion count 0 requires allow_empty (empty-mask samples)",
            ));
        }
        if !(self.lesion_radius.0 >= 2.0 && self.lesion_radius.0 <= self.lesion_radius.1) {
            return Err(Error::config("lesion radii must satisfy 2 <= lo <= hi"));
        }
        if !(self.contrast.0 > 0.0 && self.contrast.0 <= self.contrast.1 && self.contrast.1 <= 0.5)
        {
            return Err(Error::config("contrast offsets must lie in (0, 0.5]"));
        }
        if self.lesion_radius.1 + 2.0 > self.image_size as f64 / 2.0 {
            return Err(Error::config(format!(
                "lesions of radius {} cannot fit inside a {}px frame",
                self.lesion_radius.1, self.image_size
            )));
        }
        if self.background_scale <= 0.0
            || self.background_amplitude < 0.0
            || self.edge_softness <= 0.0
        {
            return Err(Error::config("background/edge parameters must be positive"));
        }
        if self.count < 1 {
            return Err(Error::config("dataset size must be >= 1"));
        }
        Ok(())
    }

    /// Hash over every generation-relevant field (including the seed).
    pub fn hash(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "v1;size={};lesions={}..{};radius={:?}..{:?};contrast={:?}..{:?};bg={:?}/{:?};edge={:?};count={};seed={};allow_empty={}",
            self.image_size,
            self.lesion_count.0,
            self.lesion_count.1,
            self.lesion_radius.0,
            self.lesion_radius.1,
            self.contrast.0,
            self.contrast.1,
            self.background_scale,
            self.background_amplitude,
            self.edge_softness,
            self.count,
            self.seed,
            self.allow_empty,
        );
        let digest = Sha256::digest(s.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Aligned mask/image batch: masks valued in {-1, +1}, images in `[-1, 1]`.
pub struct PairedBatch {
    pub masks: Tensor<f32>,
    pub images: Tensor<f32>,
}

/// Counters from a generation run.
#[derive(Debug, Default, Clone, Copy)]
pub struct GenStats {
    /// Lesions dropped after bounded placement retries.
    pub skipped_lesions: usize,
    /// Samples regenerated because the mask came out empty.
    pub resampled: usize,
}

/// In-memory paired dataset.
pub struct PairedDataset {
    image_size: usize,
    masks: Vec<Vec<f32>>,
    images: Vec<Vec<f32>>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    /// Single pair as `[1, 1, H, W]` tensors.
    pub fn get(&self, index: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
        if index >= self.len() {
            return Err(Error::contract(format!(
                "sample index {index} out of {}",
                self.len()
            )));
        }
        let shape = [1, 1, self.image_size, self.image_size];
        Ok((
            Tensor::from_vec(&shape, self.masks[index].clone())?,
            Tensor::from_vec(&shape, self.images[index].clone())?,
        ))
    }

    /// Assemble `[B, 1, H, W]` batch tensors for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Result<PairedBatch> {
        let plane = self.image_size * self.image_size;
        let mut masks = Vec::with_capacity(indices.len() * plane);
        let mut images = Vec::with_capacity(indices.len() * plane);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::contract(format!(
                    "sample index {i} out of {}",
                    self.len()
                )));
            }
            masks.extend_from_slice(&self.masks[i]);
            images.extend_from_slice(&self.images[i]);
        }
        let shape = [indices.len(), 1, self.image_size, self.image_size];
        Ok(PairedBatch {
            masks: Tensor::from_vec(&shape, masks)?,
            images: Tensor::from_vec(&shape, images)?,
        })
    }

    /// Generate the full dataset in memory, deterministically from the spec.
    pub fn generate_in_memory(spec: &SyntheticSpec) -> Result<Self> {
        Ok(Self::generate_with_stats(spec)?.0)
    }

    pub fn generate_with_stats(spec: &SyntheticSpec) -> Result<(Self, GenStats)> {
        spec.validate()?;
        let base = Rng::new(spec.seed);
        let mut masks = Vec::with_capacity(spec.count);
        let mut images = Vec::with_capacity(spec.count);
        let mut stats = GenStats::default();
        for i in 0..spec.count {
            // Per-sample derived stream; resampling an empty-mask draw moves
            // to the next attempt stream, bounded.
            let mut sample = None;
            for attempt in 0..8u64 {
                let mut rng = base.split(i as u64).split(attempt);
                let (mask, image, skipped) = render_sample(spec, &mut rng);
                stats.skipped_lesions += skipped;
                let has_positive = mask.iter().any(|&v| v > 0.0);
                if has_positive || spec.allow_empty {
                    sample = Some((mask, image));
                    break;
                }
                stats.resampled += 1;
            }
            let (mask, image) = sample.ok_or_else(|| {
                Error::config(format!(
                    "sample {i}: could not place any lesion after bounded retries"
                ))
            })?;
            masks.push(mask);
            images.push(image);
        }
        Ok((
            PairedDataset {
                image_size: spec.image_size,
                masks,
                images,
            },
            stats,
        ))
    }

    /// Load every pair referenced by a manifest.
    pub fn load(manifest: &Path) -> Result<Self> {
        let entries = read_manifest(manifest)?;
        let indices: Vec<usize> = (0..entries.len()).collect();
        Self::load_indices(manifest, &indices)
    }

    fn load_indices(manifest: &Path, indices: &[usize]) -> Result<Self> {
        let entries = read_manifest(manifest)?;
        let dir = manifest.parent().unwrap_or_else(|| Path::new("."));
        let mut masks = Vec::with_capacity(indices.len());
        let mut images = Vec::with_capacity(indices.len());
        let mut size = None;
        for &i in indices {
            let (mask_rel, image_rel) = entries.get(i).ok_or_else(|| {
                Error::contract(format!("manifest has {} entries, asked for {i}", entries.len()))
            })?;
            let mask = load_mask_pgm(&dir.join(mask_rel))?;
            let image = load_image_pgm(&dir.join(image_rel))?;
            let (mh, mw, mask_data) = mask.as_plane()?;
            let (ih, iw, image_data) = image.as_plane()?;
            if mh != mw || ih != iw || mh != ih {
                return Err(Error::format(
                    manifest,
                    format!("pair {i}: mask {mh}x{mw} vs image {ih}x{iw}"),
                ));
            }
            match size {
                None => size = Some(mh),
                Some(s) if s == mh => {}
                Some(s) => {
                    return Err(Error::format(
                        manifest,
                        format!("pair {i}: size {mh} differs from {s}"),
                    ))
                }
            }
            masks.push(mask_data);
            images.push(image_data);
        }
        let image_size = size.ok_or_else(|| Error::format(manifest, "no samples selected"))?;
        Ok(PairedDataset {
            image_size,
            masks,
            images,
        })
    }

    #[cfg(test)]
    pub(crate) fn poison_for_tests(&mut self, value: f32) {
        for image in &mut self.images {
            image[0] = value;
        }
    }
}

/// Load selected pairs from a manifest as one batch.
pub fn load_batch(manifest: &Path, indices: &[usize]) -> Result<PairedBatch> {
    let ds = PairedDataset::load_indices(manifest, indices)?;
    let all: Vec<usize> = (0..ds.len()).collect();
    ds.batch(&all)
}

fn render_sample(spec: &SyntheticSpec, rng: &mut Rng) -> (Vec<f32>, Vec<f32>, usize) {
    let size = spec.image_size;
    let plane = size * size;

    // Smoothed-noise background, renormalized to the configured amplitude.
    let mut field = vec![0.0f64; plane];
    rng.fill_gauss_f64(&mut field);
    let mut bg = gaussian_blur(&field, size, size, spec.background_scale);
    let mean = bg.iter().sum::<f64>() / plane as f64;
    let var = bg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
    let scale = if var > 0.0 {
        spec.background_amplitude / var.sqrt()
    } else {
        0.0
    };
    for v in &mut bg {
        *v = (*v - mean) * scale;
    }

    let mut mask = vec![false; plane];
    let mut image = bg;
    let mut skipped = 0usize;

    let n_lesions = rng.range_inclusive(spec.lesion_count.0, spec.lesion_count.1);
    for _ in 0..n_lesions {
        let mut placed = false;
        for _ in 0..16 {
            let rx = rng.uniform_in(spec.lesion_radius.0, spec.lesion_radius.1);
            let ry = rng.uniform_in(spec.lesion_radius.0, spec.lesion_radius.1);
            let theta = rng.uniform_in(0.0, std::f64::consts::PI);
            let contrast = rng.uniform_in(spec.contrast.0, spec.contrast.1);
            let margin = rx.max(ry) + 1.0;
            if 2.0 * margin >= (size - 1) as f64 {
                continue;
            }
            let cx = rng.uniform_in(margin, (size - 1) as f64 - margin);
            let cy = rng.uniform_in(margin, (size - 1) as f64 - margin);
            render_lesion(
                &mut mask, &mut image, size, cx, cy, rx, ry, theta, contrast,
                spec.edge_softness,
            );
            placed = true;
            break;
        }
        if !placed {
            skipped += 1;
        }
    }

    let mask_f: Vec<f32> = mask.iter().map(|&m| if m { 1.0 } else { -1.0 }).collect();
    let image_f: Vec<f32> = image
        .iter()
        .map(|&v| (v.clamp(-1.0, 1.0)) as f32)
        .collect();
    (mask_f, image_f, skipped)
}

#[allow(clippy::too_many_arguments)]
fn render_lesion(
    mask: &mut [bool],
    image: &mut [f64],
    size: usize,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    theta: f64,
    contrast: f64,
    edge: f64,
) {
    let (sin_t, cos_t) = theta.sin_cos();
    let r_min = rx.min(ry);
    for row in 0..size {
        for col in 0..size {
            let dx = col as f64 - cx;
            let dy = row as f64 - cy;
            let u = dx * cos_t + dy * sin_t;
            let v = -dx * sin_t + dy * cos_t;
            let rho = ((u / rx) * (u / rx) + (v / ry) * (v / ry)).sqrt();
            // Approximate signed distance to the ellipse boundary (positive
            // inside); exact support test stays on rho itself.
            let d = (1.0 - rho) * r_min;
            if rho <= 1.0 {
                mask[row * size + col] = true;
            }
            // Blurred-step edge profile with its 50% point `edge` px outside
            // the boundary, so mask pixels sit on the saturated side.
            let s = normal_cdf((d + edge) / edge);
            if s > 1e-9 {
                image[row * size + col] += contrast * s;
            }
        }
    }
}

// PGM I/O

/// Write a `[-1, 1]` image plane as 16-bit binary PGM.
pub fn save_image(tensor: &Tensor<f32>, path: &Path) -> Result<()> {
    let (h, w, data) = tensor.as_plane()?;
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w} {h}\n65535\n")?;
    for v in data {
        let q = (((v as f64 + 1.0) / 2.0 * 65535.0).round()).clamp(0.0, 65535.0) as u16;
        out.write_all(&q.to_be_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Write a {-1, +1} mask plane as 8-bit binary PGM with values {0, 255}.
pub fn save_mask(tensor: &Tensor<f32>, path: &Path) -> Result<()> {
    let (h, w, data) = tensor.as_plane()?;
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = data.iter().map(|&v| if v > 0.0 { 255 } else { 0 }).collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

struct PgmHeader {
    width: usize,
    height: usize,
    maxval: usize,
}

fn read_pgm(path: &Path) -> Result<(PgmHeader, Vec<u8>)> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::format(path, "not a binary PGM (P5) file"));
    }
    // Header tokens: width, height, maxval; whitespace-separated with
    // optional '#' comment lines; a single whitespace byte ends the header.
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Skip whitespace and comments.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "malformed PGM header"));
        }
        let token = std::str::from_utf8(&bytes[start..pos]).expect("digits are UTF-8");
        *field = token
            .parse()
            .map_err(|_| Error::format(path, "numeric field out of range"))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format(path, "missing separator after PGM header"));
    }
    pos += 1;
    let header = PgmHeader {
        width: fields[0],
        height: fields[1],
        maxval: fields[2],
    };
    if header.width == 0 || header.height == 0 {
        return Err(Error::format(path, "zero-sized PGM"));
    }
    Ok((header, bytes[pos..].to_vec()))
}

/// Load an 8-bit {0, 255} mask PGM as a {-1, +1} tensor.
pub fn load_mask_pgm(path: &Path) -> Result<Tensor<f32>> {
    let (header, payload) = read_pgm(path)?;
    if header.maxval != 255 {
        return Err(Error::format(
            path,
            format!("mask PGM must have maxval 255, got {}", header.maxval),
        ));
    }
    let n = header.width * header.height;
    if payload.len() != n {
        return Err(Error::format(
            path,
            format!("expected {n} payload bytes, got {}", payload.len()),
        ));
    }
    let mut data = Vec::with_capacity(n);
    for &b in &payload {
        match b {
            0 => data.push(-1.0f32),
            255 => data.push(1.0f32),
            other => {
                return Err(Error::format(
                    path,
                    format!("mask pixels must be 0 or 255, found {other}"),
                ))
            }
        }
    }
    Tensor::from_vec(&[1, 1, header.height, header.width], data)
}

/// Load a 16-bit PGM as a `[-1, 1]` tensor.
pub fn load_image_pgm(path: &Path) -> Result<Tensor<f32>> {
    let (header, payload) = read_pgm(path)?;
    if header.maxval != 65535 {
        return Err(Error::format(
            path,
            format!("image PGM must have maxval 65535, got {}", header.maxval),
        ));
    }
    let n = header.width * header.height;
    if payload.len() != 2 * n {
        return Err(Error::format(
            path,
            format!("expected {} payload bytes, got {}", 2 * n, payload.len()),
        ));
    }
    let data: Vec<f32> = payload
        .chunks_exact(2)
        .map(|c| {
            let q = u16::from_be_bytes([c[0], c[1]]) as f64;
            (q / 65535.0 * 2.0 - 1.0) as f32
        })
        .collect();
    Tensor::from_vec(&[1, 1, header.height, header.width], data)
}

// Manifest

/// Write a dataset directory: numbered PGM pairs plus `manifest.txt`.
/// Returns the manifest path and generation stats.
pub fn generate_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<(PathBuf, GenStats)> {
    let (dataset, stats) = PairedDataset::generate_with_stats(spec)?;
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let (mask, image) = dataset.get(i)?;
        let mask_name = format!("mask_{i:05}.pgm");
        let image_name = format!("image_{i:05}.pgm");
        save_mask(&mask, &dir.join(&mask_name))?;
        save_image(&image, &dir.join(&image_name))?;
        entries.push((mask_name, image_name));
    }
    let manifest = dir.join("manifest.txt");
    write_manifest(&manifest, &spec.hash(), &entries)?;
    Ok((manifest, stats))
}

pub fn write_manifest(path: &Path, spec_hash: &str, entries: &[(String, String)]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "# spec_hash={spec_hash}")?;
    for (mask, image) in entries {
        writeln!(out, "{mask}\t{image}")?;
    }
    out.flush()?;
    Ok(())
}

/// `(mask_path, image_path)` entries; extra tab-separated columns (e.g. the
/// per-sample seed in sampler outputs) are ignored.
pub fn read_manifest(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split('\t');
        let mask = cols.next().unwrap_or_default();
        let image = cols.next().ok_or_else(|| {
            Error::format(path, format!("line {}: expected mask<TAB>image", lineno + 1))
        })?;
        entries.push((mask.to_string(), image.to_string()));
    }
    Ok(entries)
}

/// Spec hash recorded in a manifest header, if present.
pub fn manifest_spec_hash(path: &Path) -> Result<Option<String>> {
    let text = std::fs::read_to_string(path)?;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# spec_hash=") {
            return Ok(Some(rest.trim().to_string()));
        }
    }
    Ok(None)
}
