//! Image datasets: a deterministic synthetic generator, a fixed-record binary format,
//! augmentation, stratified subsets and batching.

use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"NSDB";
const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Eval,
}

impl Split {
    fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Eval => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    /// `[N, 3, H, W]` with values in `[0, 1]`.
    images: Tensor,
    labels: Vec<usize>,
    splits: Vec<Split>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, num_classes: usize, images: Tensor, labels: Vec<usize>) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "images {s:?} do not match {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Input(format!("label {bad} outside [0, {num_classes})")));
        }
        let n = labels.len();
        Ok(Dataset {
            name: name.into(),
            num_classes,
            images,
            labels,
            splits: vec![Split::Train; n],
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.images.dim(2), self.images.dim(3))
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.splits.iter().filter(|&&s| s == split).count()
    }

    /// Indices of items tagged `split`, in dataset order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Retags the last `val_per_class` items of every class as validation and the
    /// `eval_per_class` before them as evaluation; everything else becomes training.
    pub fn assign_splits(&mut self, val_per_class: usize, eval_per_class: usize) -> Result<()> {
        let by_class = self.class_indices();
        for (c, idx) in by_class.iter().enumerate() {
            if idx.len() < val_per_class + eval_per_class + 1 {
                return Err(Error::Config(format!(
                    "class {c} has {} items; cannot hold out {val_per_class} + {eval_per_class}",
                    idx.len()
                )));
            }
            let n = idx.len();
            for (k, &i) in idx.iter().enumerate() {
                self.splits[i] = if k >= n - val_per_class {
                    Split::Val
                } else if k >= n - val_per_class - eval_per_class {
                    Split::Eval
                } else {
                    Split::Train
                };
            }
        }
        Ok(())
    }

    fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }

    /// Items at `indices` as a new dataset, keeping split tags.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            num_classes: self.num_classes,
            images: self.images.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            splits: indices.iter().map(|&i| self.splits[i]).collect(),
        }
    }

    /// Items tagged `split` as a new dataset.
    pub fn split(&self, split: Split) -> Dataset {
        self.select(&self.indices(split))
    }

    /// Images and labels at `indices`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.images.gather_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Shuffled index batches over the whole dataset; the last short batch is dropped
    /// when `drop_last` is set.
    pub fn shuffled_batches(&self, batch_size: usize, drop_last: bool, rng: &mut dyn RngCore) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order
            .chunks(batch_size.max(1))
            .filter(|c| !drop_last || c.len() == batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Sequential batches of images and labels, for evaluation.
    pub fn sequential_batches(&self, batch_size: usize) -> Vec<(Tensor, Vec<usize>)> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size.max(1)).map(|c| self.batch(c)).collect()
    }

    /// SHA-256 over shape, labels, split tags and pixel bits.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for d in self.images.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        h.update((self.num_classes as u64).to_le_bytes());
        for (&l, &s) in self.labels.iter().zip(&self.splits) {
            h.update((l as u32).to_le_bytes());
            h.update([s.tag()]);
        }
        for v in self.images.data() {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Writes the fixed-record binary format: a 16-byte header, then per item one label
    /// byte and `3·H·W` channel-planar pixel bytes.
    pub fn save_binary(&self, path: &Path) -> Result<()> {
        let (h, w) = self.resolution();
        if self.num_classes > 256 || h > u16::MAX as usize || w > u16::MAX as usize {
            return Err(Error::Input("dataset does not fit the binary format".into()));
        }
        let rec = 1 + 3 * h * w;
        let mut out = Vec::with_capacity(HEADER_LEN + rec * self.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(h as u16).to_le_bytes());
        out.extend_from_slice(&(w as u16).to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        let per = 3 * h * w;
        for (i, &l) in self.labels.iter().enumerate() {
            out.push(l as u8);
            out.extend(
                self.images.data()[i * per..(i + 1) * per]
                    .iter()
                    .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
            );
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads [`Dataset::save_binary`] output; `num_classes` is the largest label plus one.
    pub fn load_binary(path: &Path) -> Result<Dataset> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("dataset")
            .to_string();
        Self::parse_binary(name, &bytes)
    }

    pub fn parse_binary(name: String, bytes: &[u8]) -> Result<Dataset> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                msg: format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad magic".into(),
            });
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let version = u16_at(4);
        if version != FORMAT_VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported version {version}"),
            });
        }
        let (h, w) = (u16_at(6) as usize, u16_at(8) as usize);
        let n = u32::from_le_bytes([bytes[12], bytes[13], bytes[14], bytes[15]]) as usize;
        let per = 3 * h * w;
        let expected = HEADER_LEN + n * (1 + per);
        if bytes.len() != expected {
            return Err(Error::Format {
                offset: bytes.len().min(expected) as u64,
                msg: format!("expected {expected} bytes for {n} records, found {}", bytes.len()),
            });
        }
        let mut labels = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n * per);
        for rec in bytes[HEADER_LEN..].chunks_exact(1 + per) {
            labels.push(rec[0] as usize);
            data.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
        }
        let classes = labels.iter().max().map_or(1, |m| m + 1);
        Dataset::new(name, classes, Tensor::new(vec![n, 3, h, w], data)?, labels)
    }
}

/// Class-conditional oriented gratings under a random Gaussian window, plus noise.
///
/// A class fixes an orientation and a pair of spatial frequencies; each image draws a
/// random phase, window position, color mix and a small orientation jitter, so class
/// evidence is local structure rather than any fixed pixel template. Pixels are quantized
/// to multiples of 1/255 so that the binary format round-trips exactly.
pub fn gen_synthetic(
    num_classes: usize,
    per_class: usize,
    resolution: usize,
    difficulty: f32,
    seed: u64,
) -> Result<Dataset> {
    if resolution < 8 {
        return Err(Error::Config(format!("resolution {resolution} is below 8")));
    }
    if num_classes == 0 || num_classes > 256 {
        return Err(Error::Config(format!("{num_classes} classes is out of range")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_orient = num_classes.div_ceil(2);
    let r = resolution as f32;
    let noise = Normal::new(0.0f32, 0.25 * difficulty.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let per = 3 * resolution * resolution;
    let n = num_classes * per_class;
    let mut data = vec![0.0f32; n * per];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % num_classes;
        labels.push(c);
        let base_theta = PI * (c % n_orient) as f32 / n_orient as f32;
        let jitter = 0.5 * PI / n_orient as f32 * difficulty.min(1.0);
        let theta = base_theta + rng.random_range(-0.5..0.5) * jitter;
        let band = if c < n_orient { 1.0 } else { 1.5 };
        let f1 = band * rng.random_range(0.92..1.08) * 3.0 / r;
        let f2 = 2.0 * f1;
        let phase1 = rng.random_range(0.0..2.0 * PI);
        let phase2 = rng.random_range(0.0..2.0 * PI);
        // A distractor grating of random orientation and frequency.
        let dtheta = rng.random_range(0.0..PI);
        let df = rng.random_range(1.0..1.5) * 3.0 / r;
        let dphase = rng.random_range(0.0..2.0 * PI);
        let damp = 0.6 * difficulty.max(0.0) * rng.random_range(0.5..1.0);
        let (cx, cy) = (rng.random_range(0.3..0.7) * r, rng.random_range(0.3..0.7) * r);
        let sigma = rng.random_range(0.25..0.4) * r;
        let mut color = [0.0f32; 3];
        for v in &mut color {
            *v = rng.random_range(0.4..1.0);
        }
        let background = rng.random_range(0.35..0.65);
        let (s, co) = theta.sin_cos();
        let (ds, dc) = dtheta.sin_cos();
        let img = &mut data[i * per..(i + 1) * per];
        for y in 0..resolution {
            for x in 0..resolution {
                let (dx, dy) = (x as f32 - cx, y as f32 - cy);
                let u = dx * co + dy * s;
                let env = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                let du = dx * dc + dy * ds;
                let pattern = 0.7 * (2.0 * PI * f1 * u + phase1).sin()
                    + 0.3 * (2.0 * PI * f2 * u + phase2).sin()
                    + damp * (2.0 * PI * df * du + dphase).sin();
                for (ch, &col) in color.iter().enumerate() {
                    let v = background + 0.35 * col * env * pattern + noise.sample(&mut rng);
                    img[ch * resolution * resolution + y * resolution + x] =
                        (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
                }
            }
        }
    }
    Dataset::new(
        format!("synthetic-{num_classes}c-{resolution}px"),
        num_classes,
        Tensor::new(vec![n, 3, resolution, resolution], data)?,
        labels,
    )
}

/// Stratified subsample keeping `floor(fraction·n_c)` items of each class, in original order.
pub fn subset(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("subset fraction {fraction} outside (0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for (c, mut idx) in dataset.class_indices().into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let k = (idx.len() as f64 * fraction + 1e-9).floor() as usize;
        if k == 0 {
            return Err(Error::Config(format!(
                "fraction {fraction} leaves no items of class {c} ({} available)",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        keep.extend_from_slice(&idx[..k]);
    }
    keep.sort_unstable();
    Ok(dataset.select(&keep))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub brightness_contrast_prob: f32,
    pub max_rotation_deg: f32,
    pub crop_size: usize,
    pub crop_padding: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            brightness_contrast_prob: 0.5,
            max_rotation_deg: 15.0,
            crop_size: 32,
            crop_padding: 4,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self, resolution: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.brightness_contrast_prob) {
            return Err(Error::Config("brightness_contrast_prob must lie in [0, 1]".into()));
        }
        if self.max_rotation_deg.is_nan() || self.max_rotation_deg < 0.0 {
            return Err(Error::Config("max_rotation_deg must be non-negative".into()));
        }
        if self.crop_size == 0 || self.crop_size > resolution + 2 * self.crop_padding {
            return Err(Error::Config(format!(
                "crop_size {} does not fit {resolution} + 2·{}",
                self.crop_size, self.crop_padding
            )));
        }
        Ok(())
    }
}

/// Applies photometric jitter, rotation and pad-then-crop to every image independently.
pub fn augment(batch: &Tensor, cfg: &AugmentConfig, rng: &mut dyn RngCore) -> Tensor {
    if !cfg.enabled {
        return batch.clone();
    }
    let (n, c, h, w) = (batch.dim(0), batch.dim(1), batch.dim(2), batch.dim(3));
    let crop = cfg.crop_size;
    let pad = cfg.crop_padding;
    let plane = h * w;
    let mut out = Tensor::zeros(&[n, c, crop, crop]);
    let mut img = vec![0.0f32; c * plane];
    let mut rotated = vec![0.0f32; c * plane];
    for i in 0..n {
        img.copy_from_slice(&batch.data()[i * c * plane..(i + 1) * c * plane]);
        if rng.random::<f32>() < cfg.brightness_contrast_prob {
            let brightness = rng.random_range(0.8f32..1.2);
            let contrast = rng.random_range(0.8f32..1.2);
            let mean = img.iter().map(|&v| v as f64).sum::<f64>() as f32 / img.len() as f32;
            for v in &mut img {
                *v = ((*v - mean) * contrast + mean) * brightness;
            }
        }
        let angle = if cfg.max_rotation_deg > 0.0 {
            rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg).to_radians()
        } else {
            0.0
        };
        let src: &[f32] = if angle != 0.0 {
            rotate_bilinear(&img, c, h, w, angle, &mut rotated);
            &rotated
        } else {
            &img
        };
        let max_off_y = h + 2 * pad - crop;
        let max_off_x = w + 2 * pad - crop;
        let oy = rng.random_range(0..=max_off_y) as isize - pad as isize;
        let ox = rng.random_range(0..=max_off_x) as isize - pad as isize;
        let dst = &mut out.data_mut()[i * c * crop * crop..(i + 1) * c * crop * crop];
        for ch in 0..c {
            for y in 0..crop {
                let sy = y as isize + oy;
                for x in 0..crop {
                    let sx = x as isize + ox;
                    let v = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        src[ch * plane + sy as usize * w + sx as usize]
                    } else {
                        0.0
                    };
                    dst[ch * crop * crop + y * crop + x] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    out
}

/// Rotates each channel about the image center with bilinear sampling and zero fill.
fn rotate_bilinear(src: &[f32], c: usize, h: usize, w: usize, angle: f32, dst: &mut [f32]) {
    let (s, co) = angle.sin_cos();
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    let plane = h * w;
    let at = |ch: usize, y: isize, x: isize| -> f32 {
        if y < 0 || x < 0 || y as usize >= h || x as usize >= w {
            0.0
        } else {
            src[ch * plane + y as usize * w + x as usize]
        }
    };
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f32 - cy, x as f32 - cx);
            // Inverse map: output pixel samples the source rotated by -angle.
            let sx = co * dx + s * dy + cx;
            let sy = -s * dx + co * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ch in 0..c {
                let v = (1.0 - fy) * ((1.0 - fx) * at(ch, y0, x0) + fx * at(ch, y0, x0 + 1))
                    + fy * ((1.0 - fx) * at(ch, y0 + 1, x0) + fx * at(ch, y0 + 1, x0 + 1));
                dst[ch * plane + y * w + x] = v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = gen_synthetic(4, 5, 8, 0.5, 1).unwrap();
        let b = gen_synthetic(4, 5, 8, 0.5, 1).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        assert_ne!(a.content_hash(), gen_synthetic(4, 5, 8, 0.5, 2).unwrap().content_hash());
        for c in 0..4 {
            assert_eq!(a.labels().iter().filter(|&&l| l == c).count(), 5);
        }
        assert!(a.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(gen_synthetic(2, 1, 7, 0.5, 0).is_err());
    }

    #[test]
    fn hand_built_two_record_fixture() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"NSDB");
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&32u16.to_le_bytes());
        bytes.extend_from_slice(&32u16.to_le_bytes());
        bytes.extend_from_slice(&0u16.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        for label in [3u8, 7] {
            bytes.push(label);
            bytes.extend((0..3 * 32 * 32).map(|i| (i % 256) as u8));
        }
        let d = Dataset::parse_binary("fixture".into(), &bytes).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels(), &[3, 7]);
        assert_eq!(d.num_classes, 8);
        assert_eq!(d.images().shape(), &[2, 3, 32, 32]);
        assert_eq!(d.images().data()[1024 + 1], 1.0 / 255.0);
        assert_eq!(d.images().data()[255], 1.0);

        let short = &bytes[..bytes.len() - 10];
        match Dataset::parse_binary("x".into(), short) {
            Err(Error::Format { msg, .. }) => {
                assert!(msg.contains(&format!("expected {}", bytes.len())), "{msg}");
                assert!(msg.contains(&format!("found {}", short.len())), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Dataset::parse_binary("x".into(), &bad),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn subset_is_stratified() {
        let d = gen_synthetic(10, 400, 8, 0.5, 0).unwrap();
        let s = subset(&d, 1.0 / 20.0, 3).unwrap();
        assert_eq!(s.len(), 200);
        for c in 0..10 {
            assert_eq!(s.labels().iter().filter(|&&l| l == c).count(), 20);
        }
        assert_eq!(s.content_hash(), subset(&d, 1.0 / 20.0, 3).unwrap().content_hash());
        assert_eq!(subset(&d, 1.0, 9).unwrap().content_hash(), d.content_hash());
        assert!(matches!(subset(&d, 1e-4, 0), Err(Error::Config(_))));
    }

    #[test]
    fn splits_are_stratified() {
        let mut d = gen_synthetic(3, 10, 8, 0.5, 0).unwrap();
        d.assign_splits(2, 1).unwrap();
        assert_eq!(d.split_len(Split::Val), 6);
        assert_eq!(d.split_len(Split::Eval), 3);
        assert_eq!(d.split_len(Split::Train), 21);
        assert!(d.assign_splits(8, 2).is_err());
    }

    #[test]
    fn degenerate_augmentation_is_identity() {
        let d = gen_synthetic(2, 2, 8, 0.5, 0).unwrap();
        let cfg = AugmentConfig {
            enabled: true,
            brightness_contrast_prob: 0.0,
            max_rotation_deg: 0.0,
            crop_size: 8,
            crop_padding: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(augment(d.images(), &cfg, &mut rng).max_abs_diff(d.images()) <= 1e-6);
        assert!(augment(d.images(), &AugmentConfig::disabled(), &mut rng).bit_eq(d.images()));
    }

    #[test]
    fn zero_angle_bilinear_is_exact() {
        let d = gen_synthetic(1, 1, 9, 0.5, 0).unwrap();
        let mut out = vec![0.0; 3 * 81];
        rotate_bilinear(d.images().data(), 3, 9, 9, 0.0, &mut out);
        assert_eq!(out, d.images().data());
    }

    #[test]
    fn augmentation_stays_in_range() {
        let d = gen_synthetic(2, 4, 16, 1.0, 0).unwrap();
        let cfg = AugmentConfig {
            crop_size: 12,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = augment(d.images(), &cfg, &mut rng);
        assert_eq!(out.shape(), &[8, 3, 12, 12]);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
