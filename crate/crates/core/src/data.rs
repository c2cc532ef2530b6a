//! Datasets, IDX files, synthetic class-template data, K-shot sampling and augmentations.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};

use crate::error::{invalid, shape_err, IdxError, Result};
use crate::tensor::{Matrix, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
/// Four-dimensional `(n, c, h, w)` unsigned-byte images.
pub const IDX_IMAGES_CHW_MAGIC: u32 = 0x0000_0804;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images in `[0, 1]` with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.n() != labels.len() {
            return Err(shape_err(format!(
                "{} images but {} labels",
                images.n(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let [_, c, h, w] = self.images.shape();
        [c, h, w]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_samples(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// `(n, classes)` one-hot label matrix.
    pub fn one_hot(&self) -> Matrix {
        let mut m = Matrix::zeros(self.len(), self.num_classes);
        for (i, &l) in self.labels.iter().enumerate() {
            m.data_mut()[i * self.num_classes + l] = 1.0;
        }
        m
    }
}

fn be_u32(bytes: &[u8], at: usize) -> std::result::Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(IdxError::Truncated {
            needed: at + 4,
            available: bytes.len(),
        })
}

fn checked_product(dims: &[u32]) -> std::result::Result<usize, IdxError> {
    dims.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d as usize)
            .ok_or_else(|| IdxError::DimensionOverflow(format!("dimensions {dims:?}")))
    })
}

/// Parses an IDX image file into `(shape, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> std::result::Result<([usize; 4], Vec<u8>), IdxError> {
    let magic = be_u32(bytes, 0)?;
    let ndims = match magic {
        IDX_IMAGES_MAGIC => 3,
        IDX_IMAGES_CHW_MAGIC => 4,
        found => {
            return Err(IdxError::BadMagic {
                found,
                expected: IDX_IMAGES_MAGIC,
            })
        }
    };
    let dims: Vec<u32> = (0..ndims)
        .map(|i| be_u32(bytes, 4 + 4 * i))
        .collect::<std::result::Result<_, _>>()?;
    let count = checked_product(&dims)?;
    let start = 4 + 4 * ndims;
    let end = start
        .checked_add(count)
        .ok_or_else(|| IdxError::DimensionOverflow(format!("dimensions {dims:?}")))?;
    let pixels = bytes.get(start..end).ok_or(IdxError::Truncated {
        needed: end,
        available: bytes.len(),
    })?;
    let shape = if ndims == 3 {
        [dims[0] as usize, 1, dims[1] as usize, dims[2] as usize]
    } else {
        [
            dims[0] as usize,
            dims[1] as usize,
            dims[2] as usize,
            dims[3] as usize,
        ]
    };
    Ok((shape, pixels.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> std::result::Result<Vec<u8>, IdxError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(IdxError::BadMagic {
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    let end = 8usize
        .checked_add(n)
        .ok_or_else(|| IdxError::DimensionOverflow(format!("label count {n}")))?;
    bytes
        .get(8..end)
        .map(|b| b.to_vec())
        .ok_or(IdxError::Truncated {
            needed: end,
            available: bytes.len(),
        })
}

/// Builds a dataset from IDX image and label bytes; the class count is `max label + 1`.
pub fn dataset_from_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Dataset> {
    let (shape, pixels) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if shape[0] != labels.len() {
        return Err(IdxError::CountMismatch {
            images: shape[0],
            labels: labels.len(),
        }
        .into());
    }
    let num_classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let images = Tensor::from_parts(shape, pixels.iter().map(|&p| p as f64 / 255.0).collect());
    Dataset::new(
        images,
        labels.into_iter().map(usize::from).collect(),
        num_classes,
    )
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    dataset_from_idx(&fs::read(images_path)?, &fs::read(labels_path)?)
}

/// Encodes a dataset as IDX bytes; pixels are rounded to the nearest 1/255.
pub fn encode_idx(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    if ds.num_classes > 256 {
        return Err(invalid("IDX labels hold at most 256 classes"));
    }
    let [n, c, h, w] = ds.images.shape();
    let mut images = Vec::with_capacity(20 + ds.images.len());
    if c == 1 {
        images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        for d in [n, h, w] {
            images.extend_from_slice(&(d as u32).to_be_bytes());
        }
    } else {
        images.extend_from_slice(&IDX_IMAGES_CHW_MAGIC.to_be_bytes());
        for d in [n, c, h, w] {
            images.extend_from_slice(&(d as u32).to_be_bytes());
        }
    }
    images.extend(
        ds.images
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    let mut labels = Vec::with_capacity(8 + n);
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    labels.extend(ds.labels.iter().map(|&l| l as u8));
    Ok((images, labels))
}

pub fn write_idx(
    ds: &Dataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let (images, labels) = encode_idx(ds)?;
    fs::write(images_path, images)?;
    fs::write(labels_path, labels)?;
    Ok(())
}

/// Synthetic class-template data.
///
/// Each class owns a smooth template per channel: a sum of a few Gaussian
/// bumps with seeded centers, widths and signs, rescaled to `[0.1, 0.9]`.
/// A sample is its class template shifted by up to `max_shift` pixels,
/// plus pixelwise Gaussian noise, clamped to `[0, 1]`. Templates depend only
/// on `template_seed`, so fresh draws of the same task use a new `sample_seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub noise: f64,
    pub max_shift: usize,
    pub bumps: usize,
    pub template_seed: u64,
    pub sample_seed: u64,
}

impl SynthSpec {
    pub fn new(
        num_classes: usize,
        per_class: usize,
        c: usize,
        h: usize,
        w: usize,
        seed: u64,
    ) -> Self {
        Self {
            num_classes,
            per_class,
            channels: c,
            height: h,
            width: w,
            noise: 0.25,
            max_shift: 1,
            bumps: 4,
            template_seed: seed,
            sample_seed: seed.wrapping_add(0x5eed),
        }
    }

    /// Class templates, `(num_classes, c, h, w)`.
    pub fn templates(&self) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.template_seed);
        let (h, w) = (self.height, self.width);
        let mut data = Vec::with_capacity(self.num_classes * self.channels * h * w);
        for _ in 0..self.num_classes {
            for _ in 0..self.channels {
                let bumps: Vec<(f64, f64, f64, f64)> = (0..self.bumps.max(1))
                    .map(|_| {
                        let cy = rng.random_range(0.0..h as f64);
                        let cx = rng.random_range(0.0..w as f64);
                        let width = rng.random_range(0.12..0.3) * h.max(w) as f64;
                        let amp = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                        (cy, cx, width, amp)
                    })
                    .collect();
                let plane: Vec<f64> = (0..h * w)
                    .map(|p| {
                        let (y, x) = ((p / w) as f64, (p % w) as f64);
                        bumps
                            .iter()
                            .map(|&(cy, cx, s, a)| {
                                a * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * s * s)).exp()
                            })
                            .sum()
                    })
                    .collect();
                let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let span = if hi > lo { hi - lo } else { 1.0 };
                data.extend(plane.iter().map(|&v| 0.1 + 0.8 * (v - lo) / span));
            }
        }
        Tensor::from_parts([self.num_classes, self.channels, h, w], data)
    }

    pub fn generate(&self) -> Result<Dataset> {
        if self.num_classes == 0 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(invalid("synthetic dataset needs positive extents"));
        }
        let templates = self.templates();
        let mut rng = ChaCha8Rng::seed_from_u64(self.sample_seed);
        let normal = Normal::new(0.0, self.noise.max(0.0)).map_err(|e| invalid(e.to_string()))?;
        let (c, h, w) = (self.channels, self.height, self.width);
        let n = self.num_classes * self.per_class;
        let mut data = Vec::with_capacity(n * c * h * w);
        let mut labels = Vec::with_capacity(n);
        let shift = self.max_shift as i64;
        for i in 0..n {
            let class = i % self.num_classes;
            let dy = rng.random_range(-shift..=shift);
            let dx = rng.random_range(-shift..=shift);
            for ch in 0..c {
                for y in 0..h as i64 {
                    for x in 0..w as i64 {
                        let sy = (y - dy).clamp(0, h as i64 - 1) as usize;
                        let sx = (x - dx).clamp(0, w as i64 - 1) as usize;
                        let base = templates.get([class, ch, sy, sx]);
                        data.push((base + normal.sample(&mut rng)).clamp(0.0, 1.0));
                    }
                }
            }
            labels.push(class);
        }
        Dataset::new(
            Tensor::from_parts([n, c, h, w], data),
            labels,
            self.num_classes,
        )
    }
}

/// Synthetic dataset with default noise settings; deterministic in `seed`.
pub fn synth_blobs(
    num_classes: usize,
    per_class: usize,
    c: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<Dataset> {
    SynthSpec::new(num_classes, per_class, c, h, w, seed).generate()
}

fn class_rng(seed: u64, class: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(class as u64);
    rng
}

/// Exactly `k` samples per class, chosen as the first `k` entries of a
/// seeded shuffle of that class's indices; output is grouped by class.
pub fn kshot_sample(ds: &Dataset, k: usize, seed: u64) -> Result<Dataset> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut chosen = Vec::with_capacity(k * ds.num_classes);
    for (class, mut idx) in by_class.into_iter().enumerate() {
        if idx.len() < k {
            return Err(invalid(format!(
                "class {class} has {} samples, fewer than K = {k}",
                idx.len()
            )));
        }
        idx.shuffle(&mut class_rng(seed, class));
        chosen.extend_from_slice(&idx[..k]);
    }
    Ok(ds.subset(&chosen))
}

/// A batch whose labels may be soft probability vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftBatch {
    pub images: Tensor,
    /// `(n, classes)` rows summing to one.
    pub targets: Matrix,
}

impl From<&Dataset> for SoftBatch {
    fn from(ds: &Dataset) -> Self {
        SoftBatch {
            images: ds.images.clone(),
            targets: ds.one_hot(),
        }
    }
}

/// Mixing coefficient drawn from `Beta(0.2, 0.2)`.
pub fn mixup_lambda(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Beta::new(0.2, 0.2)
        .expect("valid beta parameters")
        .sample(&mut rng)
}

/// Pairs sample `i` with partner `perm[i]` of a seeded permutation:
/// `x' = l x_i + (1 - l) x_j`, and the same for the label vectors.
pub fn mixup(batch: &SoftBatch, lambda: f64, seed: u64) -> Result<SoftBatch> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(invalid(format!(
            "mixup coefficient {lambda} outside [0, 1]"
        )));
    }
    let n = batch.images.n();
    if batch.targets.rows() != n {
        return Err(shape_err("mixup: image and target counts differ"));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let partner_images = batch.images.select_samples(&perm);
    let images = batch
        .images
        .affine_mix(lambda, &partner_images, 1.0 - lambda)?;
    let classes = batch.targets.cols();
    let mut targets = Matrix::zeros(n, classes);
    for i in 0..n {
        let (a, b) = (batch.targets.row(i), batch.targets.row(perm[i]));
        for j in 0..classes {
            targets.data_mut()[i * classes + j] = lambda * a[j] + (1.0 - lambda) * b[j];
        }
    }
    Ok(SoftBatch { images, targets })
}

/// Adds `N(0, (scale * max(h))^2)` noise to a feature map.
pub fn gaussian_feature_noise(h: &Tensor, scale: f64, seed: u64) -> Result<Tensor> {
    if scale < 0.0 {
        return Err(invalid("noise scale must be non-negative"));
    }
    let sd = scale * h.max_value().max(0.0);
    if sd == 0.0 {
        return Ok(h.clone());
    }
    let normal = Normal::new(0.0, sd).map_err(|e| invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = h
        .data()
        .iter()
        .map(|&v| v + normal.sample(&mut rng))
        .collect();
    Tensor::new(h.shape(), data)
}

/// Zero-pads every image by `pad` and crops a seeded window of the original size.
pub fn random_crop(x: &Tensor, pad: usize, seed: u64) -> Tensor {
    if pad == 0 {
        return x.clone();
    }
    let [n, c, h, w] = x.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Tensor::zeros(x.shape());
    for i in 0..n {
        let oy = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let ox = rng.random_range(0..=2 * pad) as isize - pad as isize;
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let sy = y as isize + oy;
                    let sx = xx as isize + ox;
                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        let dst = out.index([i, ch, y, xx]);
                        out.data_mut()[dst] = x.get([i, ch, sy as usize, sx as usize]);
                    }
                }
            }
        }
    }
    out
}
