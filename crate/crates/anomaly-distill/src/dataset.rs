//! Datasets: a seeded synthetic texture generator with ground-truth defect
//! masks, plus a directory loader for the conventional inspection layout
//! (`train/good`, `test/good`, `test/<defect>`, `ground_truth/<defect>`).

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::pnm::{self, PnmError, PnmImage};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{bilinear_resize_plane, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing dataset directory {0}")]
    MissingDir(PathBuf),
    #[error("dataset split at {0} contains no images")]
    EmptySplit(PathBuf),
    #[error("missing ground-truth mask {0}")]
    MissingMask(PathBuf),
    #[error("mask {mask} extent {mask_extent:?} does not match image {image} extent {image_extent:?}")]
    MaskExtentMismatch {
        image: String,
        mask: String,
        image_extent: (usize, usize),
        mask_extent: (usize, usize),
    },
    #[error("mask {0} must be single-channel PGM")]
    MaskNotGray(PathBuf),
    #[error("anomalous sample {0} has an empty mask")]
    EmptyMask(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Pnm(#[from] PnmError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Normal,
    Anomalous,
}

/// One image with its label and, for anomalous samples, the binary
/// ground-truth mask of the defect support.
#[derive(Clone, Debug)]
pub struct LabeledSample {
    /// Relative path-style identity, e.g. "test/blob/003".
    pub name: String,
    /// [c, h, w] intensities in [0, 1].
    pub image: Tensor<f32>,
    pub label: Label,
    /// [h, w] values in {0, 1}; present exactly for anomalous samples.
    pub mask: Option<Tensor<f32>>,
}

#[derive(Clone, Debug, Default)]
pub struct DatasetSplits {
    pub train: Vec<LabeledSample>,
    pub eval: Vec<LabeledSample>,
}

const DEFECT_KINDS: [&str; 3] = ["blob", "scratch", "swap"];

struct TextureFamily {
    // Per grating: frequency (cycles per image), orientation, amplitude.
    gratings: Vec<(f64, f64, f64)>,
    noise_amp: f64,
}

impl TextureFamily {
    fn draw(rng: &mut Rng) -> Self {
        let count = 3 + rng.below(4);
        let gratings = (0..count)
            .map(|_| {
                (
                    rng.uniform(1.5, 6.0),
                    rng.uniform(0.0, std::f64::consts::PI),
                    rng.uniform(0.3, 1.0),
                )
            })
            .collect();
        TextureFamily {
            gratings,
            noise_amp: 0.15,
        }
    }

    /// One normal texture image: the family's gratings at fresh random
    /// phases plus one octave of value noise, mapped into [0, 1].
    fn render(&self, rng: &mut Rng, extent: usize) -> Tensor<f32> {
        let phases: Vec<f64> = self
            .gratings
            .iter()
            .map(|_| rng.uniform(0.0, std::f64::consts::TAU))
            .collect();
        // Value noise: a coarse random grid upsampled to image size.
        let cells = 8usize;
        let grid: Vec<f32> = (0..(cells + 1) * (cells + 1))
            .map(|_| rng.uniform(-1.0, 1.0) as f32)
            .collect();
        let noise = bilinear_resize_plane(&grid, (cells + 1, cells + 1), (extent, extent));

        let amp_total: f64 =
            self.gratings.iter().map(|(_, _, a)| a).sum::<f64>() + self.noise_amp;
        let mut data = vec![0.0f32; extent * extent];
        for y in 0..extent {
            for x in 0..extent {
                let mut g = 0.0f64;
                for ((freq, theta, amp), phase) in self.gratings.iter().zip(&phases) {
                    let u = (theta.cos() * x as f64 + theta.sin() * y as f64) / extent as f64;
                    g += amp * (std::f64::consts::TAU * freq * u + phase).sin();
                }
                g += self.noise_amp * noise[y * extent + x] as f64;
                data[y * extent + x] = (0.5 + g / (2.0 * amp_total)) as f32;
            }
        }
        Tensor::new(vec![1, extent, extent], data).expect("texture extents")
    }
}

/// Mean intensity inside a mask (used to push defects away from the local
/// tone so clamping cannot erase them).
fn masked_mean(image: &[f32], mask: &[bool]) -> f32 {
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for (v, &m) in image.iter().zip(mask) {
        if m {
            sum += *v as f64;
            n += 1;
        }
    }
    if n == 0 {
        0.5
    } else {
        (sum / n as f64) as f32
    }
}

fn apply_blob(image: &mut [f32], extent: usize, rng: &mut Rng) -> Vec<bool> {
    let e = extent as f64;
    let cx = rng.uniform(0.2 * e, 0.8 * e);
    let cy = rng.uniform(0.2 * e, 0.8 * e);
    let ax = rng.uniform(0.06 * e, 0.15 * e);
    let ay = rng.uniform(0.06 * e, 0.15 * e);
    let rot = rng.uniform(0.0, std::f64::consts::PI);
    let magnitude = rng.uniform(0.3, 0.55) as f32;
    let mut mask = vec![false; extent * extent];
    for y in 0..extent {
        for x in 0..extent {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let u = (rot.cos() * dx + rot.sin() * dy) / ax;
            let v = (-rot.sin() * dx + rot.cos() * dy) / ay;
            mask[y * extent + x] = u * u + v * v <= 1.0;
        }
    }
    let delta = if masked_mean(image, &mask) > 0.5 {
        -magnitude
    } else {
        magnitude
    };
    for (p, &m) in image.iter_mut().zip(&mask) {
        if m {
            *p = (*p + delta).clamp(0.0, 1.0);
        }
    }
    mask
}

fn apply_scratch(image: &mut [f32], extent: usize, rng: &mut Rng) -> Vec<bool> {
    let e = extent as f64;
    let x0 = rng.uniform(0.15 * e, 0.85 * e);
    let y0 = rng.uniform(0.15 * e, 0.85 * e);
    let angle = rng.uniform(0.0, std::f64::consts::TAU);
    let len = rng.uniform(0.3 * e, 0.55 * e);
    let x1 = (x0 + angle.cos() * len).clamp(0.0, e - 1.0);
    let y1 = (y0 + angle.sin() * len).clamp(0.0, e - 1.0);
    let half_width = rng.uniform(0.8, 1.6);
    let magnitude = rng.uniform(0.35, 0.6) as f32;

    // Signed coverage per pixel from the distance to the segment.
    let seg = |px: f64, py: f64| -> f64 {
        let (vx, vy) = (x1 - x0, y1 - y0);
        let len2 = vx * vx + vy * vy;
        let t = if len2 == 0.0 {
            0.0
        } else {
            ((px - x0) * vx + (py - y0) * vy) / len2
        }
        .clamp(0.0, 1.0);
        let (qx, qy) = (x0 + t * vx, y0 + t * vy);
        ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
    };
    let mut coverage = vec![0.0f32; extent * extent];
    let mut mask = vec![false; extent * extent];
    for y in 0..extent {
        for x in 0..extent {
            let d = seg(x as f64, y as f64);
            let cov = (half_width + 0.5 - d).clamp(0.0, 1.0);
            if cov > 0.0 {
                coverage[y * extent + x] = cov as f32;
                mask[y * extent + x] = true;
            }
        }
    }
    let delta = if masked_mean(image, &mask) > 0.5 {
        -magnitude
    } else {
        magnitude
    };
    for ((p, &cov), &m) in image.iter_mut().zip(&coverage).zip(&mask) {
        if m {
            *p = (*p + delta * cov).clamp(0.0, 1.0);
        }
    }
    mask
}

fn apply_patch_swap(image: &mut [f32], extent: usize, rng: &mut Rng) -> Vec<bool> {
    let e = extent as f64;
    let side = (rng.uniform(0.16 * e, 0.25 * e) as usize).max(4);
    let draw = |rng: &mut Rng| -> (usize, usize) {
        (
            rng.below(extent - side),
            rng.below(extent - side),
        )
    };
    let (ax, ay) = draw(rng);
    // Find a disjoint second patch.
    let (bx, by) = loop {
        let (bx, by) = draw(rng);
        let overlap_x = (ax as isize - bx as isize).abs() < side as isize;
        let overlap_y = (ay as isize - by as isize).abs() < side as isize;
        if !(overlap_x && overlap_y) {
            break (bx, by);
        }
    };
    let read_patch = |img: &[f32], px: usize, py: usize| -> Vec<f32> {
        let mut out = Vec::with_capacity(side * side);
        for y in 0..side {
            for x in 0..side {
                out.push(img[(py + y) * extent + (px + x)]);
            }
        }
        out
    };
    // Swap with a quarter rotation on each side so even near-periodic
    // textures change orientation inside the patches.
    let rot90 = |p: &[f32]| -> Vec<f32> {
        let mut out = vec![0.0f32; side * side];
        for y in 0..side {
            for x in 0..side {
                out[x * side + (side - 1 - y)] = p[y * side + x];
            }
        }
        out
    };
    let pa = rot90(&read_patch(image, ax, ay));
    let pb = rot90(&read_patch(image, bx, by));
    let mut mask = vec![false; extent * extent];
    for y in 0..side {
        for x in 0..side {
            image[(ay + y) * extent + (ax + x)] = pb[y * side + x];
            image[(by + y) * extent + (bx + x)] = pa[y * side + x];
            mask[(ay + y) * extent + (ax + x)] = true;
            mask[(by + y) * extent + (bx + x)] = true;
        }
    }
    mask
}

fn mask_tensor(mask: Vec<bool>, extent: usize) -> Tensor<f32> {
    Tensor::new(
        vec![extent, extent],
        mask.into_iter().map(|m| if m { 1.0 } else { 0.0 }).collect(),
    )
    .expect("mask extents")
}

/// Generate deterministic train/eval splits of synthetic textures.
///
/// The training split holds `n_normal` normal images; the eval split holds
/// `max(1, n_normal / 4)` further normals plus `n_anomalous` defective
/// images cycling through blob, scratch and patch-swap defects, each with
/// its exact support as the mask.
pub fn generate_synthetic_dataset(
    seed: u64,
    n_normal: usize,
    n_anomalous: usize,
    extent: usize,
) -> Result<DatasetSplits> {
    if extent < 16 || extent % 4 != 0 {
        return Err(DatasetError::InvalidArgument(format!(
            "extent must be >= 16 and divisible by 4, got {extent}"
        )));
    }
    if n_normal < 2 {
        return Err(DatasetError::InvalidArgument(format!(
            "need at least 2 normal training images, got {n_normal}"
        )));
    }
    let mut rng = Rng::seed_from_u64(derive_seed(seed, "dataset"));
    let family = TextureFamily::draw(&mut rng);

    let mut splits = DatasetSplits::default();
    for i in 0..n_normal {
        splits.train.push(LabeledSample {
            name: format!("train/good/{i:03}"),
            image: family.render(&mut rng, extent),
            label: Label::Normal,
            mask: None,
        });
    }
    let n_eval_normal = (n_normal / 4).max(1);
    for i in 0..n_eval_normal {
        splits.eval.push(LabeledSample {
            name: format!("test/good/{i:03}"),
            image: family.render(&mut rng, extent),
            label: Label::Normal,
            mask: None,
        });
    }
    let mut kind_counters = [0usize; 3];
    for i in 0..n_anomalous {
        let kind_idx = i % DEFECT_KINDS.len();
        let mut image = family.render(&mut rng, extent);
        let mask = match kind_idx {
            0 => apply_blob(image.data_mut(), extent, &mut rng),
            1 => apply_scratch(image.data_mut(), extent, &mut rng),
            _ => apply_patch_swap(image.data_mut(), extent, &mut rng),
        };
        let positives = mask.iter().filter(|&&m| m).count();
        debug_assert!(positives >= 1 && positives * 4 < extent * extent);
        let idx = kind_counters[kind_idx];
        kind_counters[kind_idx] += 1;
        splits.eval.push(LabeledSample {
            name: format!("test/{}/{idx:03}", DEFECT_KINDS[kind_idx]),
            image,
            label: Label::Anomalous,
            mask: Some(mask_tensor(mask, extent)),
        });
    }
    Ok(splits)
}

/// Rotate a [c, h, w] tensor by `k` quarter turns (square images only).
pub fn rotate_quarter(t: &Tensor<f32>, k: usize) -> Tensor<f32> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    assert_eq!(h, w, "rotate_quarter needs square images");
    let mut out = t.clone();
    for _ in 0..k % 4 {
        let src = out.clone();
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.data_mut()[ci * h * w + x * w + (h - 1 - y)] =
                        src.data()[ci * h * w + y * w + x];
                }
            }
        }
    }
    out
}

fn image_file_name(base: &str, channels: usize) -> String {
    if channels == 1 {
        format!("{base}.pgm")
    } else {
        format!("{base}.ppm")
    }
}

/// Write splits in the inspection directory layout. Images are quantized
/// to 8-bit PGM (grayscale) or PPM (3-channel); masks to {0, 255} PGM.
pub fn write_dataset_dir(dir: &Path, splits: &DatasetSplits) -> Result<()> {
    let io_err = |path: &Path, source: std::io::Error| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    for sample in splits.train.iter().chain(&splits.eval) {
        let channels = sample.image.shape()[0];
        let img_path = dir.join(image_file_name(&sample.name, channels));
        let parent = img_path.parent().expect("sample names are nested");
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        pnm::write_pnm(&img_path, &pnm::from_tensor(&sample.image))?;

        if let Some(mask) = &sample.mask {
            let parts: Vec<&str> = sample.name.split('/').collect();
            let (kind, stem) = (parts[parts.len() - 2], parts[parts.len() - 1]);
            let mask_path = dir.join(format!("ground_truth/{kind}/{stem}_mask.pgm"));
            let parent = mask_path.parent().expect("mask path has parent");
            std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
            let mask3 = Tensor::new(
                vec![1, mask.shape()[0], mask.shape()[1]],
                mask.data().to_vec(),
            )?;
            pnm::write_pnm(&mask_path, &pnm::from_tensor(&mask3))?;
        }
    }
    Ok(())
}

fn adapt_channels(t: Tensor<f32>, want: usize) -> Tensor<f32> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    if c == want {
        return t;
    }
    match (c, want) {
        (3, 1) => {
            let mut data = vec![0.0f32; h * w];
            for (i, v) in data.iter_mut().enumerate() {
                *v = (t.data()[i] + t.data()[h * w + i] + t.data()[2 * h * w + i]) / 3.0;
            }
            Tensor::new(vec![1, h, w], data).expect("gray extents")
        }
        (1, 3) => {
            let mut data = Vec::with_capacity(3 * h * w);
            for _ in 0..3 {
                data.extend_from_slice(t.data());
            }
            Tensor::new(vec![3, h, w], data).expect("rgb extents")
        }
        _ => panic!("unsupported channel adaptation {c} -> {want}"),
    }
}

/// Adapt an arbitrary [c, h, w] image to the configured channel count and
/// square extent (the same rules the dataset loader applies).
pub fn conform_image(t: &Tensor<f32>, extent: usize, channels: usize) -> Tensor<f32> {
    resize_image(&adapt_channels(t.clone(), channels), extent)
}

/// Bilinear resize of a [c, h, w] tensor to a square extent (up or down).
pub fn resize_image(t: &Tensor<f32>, extent: usize) -> Tensor<f32> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    if h == extent && w == extent {
        return t.clone();
    }
    let mut data = Vec::with_capacity(c * extent * extent);
    for ci in 0..c {
        let plane = &t.data()[ci * h * w..(ci + 1) * h * w];
        data.extend(bilinear_resize_plane(plane, (h, w), (extent, extent)));
    }
    Tensor::new(vec![c, extent, extent], data).expect("resize extents")
}

fn sorted_image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|_| DatasetError::MissingDir(dir.into()))?;
    for entry in entries {
        let path = entry
            .map_err(|source| DatasetError::Io {
                path: dir.display().to_string(),
                source,
            })?
            .path();
        if path.is_file() {
            match path.extension().and_then(|e| e.to_str()) {
                Some("pgm") | Some("ppm") => files.push(path),
                _ => {}
            }
        }
    }
    files.sort();
    Ok(files)
}

fn load_image(path: &Path, extent: usize, channels: usize) -> Result<(Tensor<f32>, PnmImage)> {
    let raw = pnm::read_pnm(path)?;
    let t = pnm::to_tensor(&raw);
    let t = adapt_channels(t, channels);
    Ok((resize_image(&t, extent), raw))
}

/// Load an inspection-layout dataset, resizing every image to
/// `extent` x `extent` with `channels` channels and binarizing masks at 0.5.
pub fn load_dataset_dir(dir: &Path, extent: usize, channels: usize) -> Result<DatasetSplits> {
    if channels != 1 && channels != 3 {
        return Err(DatasetError::InvalidArgument(format!(
            "channels must be 1 or 3, got {channels}"
        )));
    }
    let train_dir = dir.join("train/good");
    let test_dir = dir.join("test");
    if !train_dir.is_dir() {
        return Err(DatasetError::MissingDir(train_dir));
    }
    if !test_dir.is_dir() {
        return Err(DatasetError::MissingDir(test_dir));
    }

    let mut splits = DatasetSplits::default();
    let train_files = sorted_image_files(&train_dir)?;
    if train_files.is_empty() {
        return Err(DatasetError::EmptySplit(train_dir));
    }
    for path in &train_files {
        let stem = path.file_stem().unwrap().to_string_lossy();
        let (image, _) = load_image(path, extent, channels)?;
        splits.train.push(LabeledSample {
            name: format!("train/good/{stem}"),
            image,
            label: Label::Normal,
            mask: None,
        });
    }

    let mut kinds: Vec<PathBuf> = std::fs::read_dir(&test_dir)
        .map_err(|_| DatasetError::MissingDir(test_dir.clone()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    kinds.sort();
    for kind_dir in kinds {
        let kind = kind_dir
            .file_name()
            .expect("dir name")
            .to_string_lossy()
            .to_string();
        for path in sorted_image_files(&kind_dir)? {
            let stem = path.file_stem().unwrap().to_string_lossy().to_string();
            let (image, raw) = load_image(&path, extent, channels)?;
            let name = format!("test/{kind}/{stem}");
            if kind == "good" {
                splits.eval.push(LabeledSample {
                    name,
                    image,
                    label: Label::Normal,
                    mask: None,
                });
                continue;
            }
            let mask_path = dir.join(format!("ground_truth/{kind}/{stem}_mask.pgm"));
            if !mask_path.is_file() {
                return Err(DatasetError::MissingMask(mask_path));
            }
            let raw_mask = pnm::read_pnm(&mask_path)?;
            if raw_mask.channels != 1 {
                return Err(DatasetError::MaskNotGray(mask_path));
            }
            if (raw_mask.height, raw_mask.width) != (raw.height, raw.width) {
                return Err(DatasetError::MaskExtentMismatch {
                    image: path.display().to_string(),
                    mask: mask_path.display().to_string(),
                    image_extent: (raw.height, raw.width),
                    mask_extent: (raw_mask.height, raw_mask.width),
                });
            }
            let mask_t = resize_image(&pnm::to_tensor(&raw_mask), extent);
            let mask = Tensor::new(
                vec![extent, extent],
                mask_t
                    .data()
                    .iter()
                    .map(|&v| if v > 0.5 { 1.0 } else { 0.0 })
                    .collect(),
            )?;
            if mask.data().iter().all(|&v| v == 0.0) {
                return Err(DatasetError::EmptyMask(name));
            }
            splits.eval.push(LabeledSample {
                name,
                image,
                label: Label::Anomalous,
                mask: Some(mask),
            });
        }
    }
    if splits.eval.is_empty() {
        return Err(DatasetError::EmptySplit(test_dir));
    }
    Ok(splits)
}
