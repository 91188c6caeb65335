//! Datasets: folder-of-class-folders ingestion, a synthetic pattern
//! generator, and seeded batch order.

use std::f64::consts::PI;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::augment::Image;
use crate::error::{PiciError, Result};
use crate::seed;

#[derive(Debug, Clone)]
pub struct Item {
    pub image: Image,
    pub label: usize,
    pub id: String,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub items: Vec<Item>,
    pub n_classes: usize,
    pub class_names: Vec<String>,
    pub name: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.label).collect()
    }

    /// Per-channel mean and standard deviation over every pixel of every item.
    pub fn channel_stats(&self) -> ([f64; 3], [f64; 3]) {
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        let mut count = 0.0;
        for item in &self.items {
            for p in item.image.pixels().chunks_exact(3) {
                for c in 0..3 {
                    sum[c] += p[c];
                    sq[c] += p[c] * p[c];
                }
                count += 1.0;
            }
        }
        let mean = sum.map(|s| s / count);
        let mut std = [0.0; 3];
        for c in 0..3 {
            let var = (sq[c] / count - mean[c] * mean[c]).max(0.0);
            std[c] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
        (mean, std)
    }
}

/// Summary of a folder load.
#[derive(Debug, Clone)]
pub struct LoadReport {
    pub dataset: Dataset,
    pub skipped: usize,
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> std::io::Result<Vec<std::path::PathBuf>> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    Ok(entries)
}

fn decode(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| PiciError::InvalidImage(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let pixels = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Ok(Image::new(h as usize, w as usize, 3, pixels)?.center_square())
}

/// Loads `root/<class>/<image>` with classes and files in lexicographic order.
///
/// Non-square images are center-cropped to a square. Unreadable files are
/// skipped and counted.
pub fn load_image_folder(root: &Path) -> Result<LoadReport> {
    let entries = sorted_entries(root)
        .map_err(|e| PiciError::EmptyDataset(format!("{}: {e}", root.display())))?;
    let mut items = Vec::new();
    let mut class_names = Vec::new();
    let mut skipped = 0;
    for dir in entries.into_iter().filter(|p| p.is_dir()) {
        let class_name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let label = class_names.len();
        let mut any = false;
        for file in sorted_entries(&dir)?.into_iter().filter(|p| p.is_file() && is_image_file(p)) {
            match decode(&file) {
                Ok(image) => {
                    let name = file.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                    items.push(Item {
                        image,
                        label,
                        id: format!("{class_name}/{name}"),
                    });
                    any = true;
                }
                Err(e) => {
                    warn!("skipping unreadable image: {e}");
                    skipped += 1;
                }
            }
        }
        if any {
            class_names.push(class_name);
        }
    }
    if items.is_empty() {
        return Err(PiciError::EmptyDataset(format!(
            "no readable images under {}",
            root.display()
        )));
    }
    Ok(LoadReport {
        dataset: Dataset {
            items,
            n_classes: class_names.len(),
            class_names,
            name: root
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into()),
        },
        skipped,
    })
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Synthetic dataset with one visual pattern per class.
///
/// Class `k` has its own base color, stripe orientation and frequency, and
/// bright-blob position. Samples jitter the blob and stripe phase and add
/// Gaussian pixel noise (σ = 0.05).
pub fn synth_blobs(n_classes: usize, per_class: usize, image_size: usize, seed_value: u64) -> Result<Dataset> {
    if n_classes == 0 || per_class == 0 || image_size == 0 {
        return Err(PiciError::EmptyDataset("synthetic dataset with no items".into()));
    }
    let s = image_size as f64;
    let noise = Normal::new(0.0, 0.05).expect("valid sigma");
    let mut items = Vec::with_capacity(n_classes * per_class);
    for k in 0..n_classes {
        let frac = k as f64 / n_classes as f64;
        let color = hsv_to_rgb(frac, 0.75, 0.8);
        let theta = PI * frac;
        let freq = 2.0 + (k % 3) as f64 * 1.5;
        let blob_angle = 2.0 * PI * frac;
        let (bx, by) = (s / 2.0 + s / 4.0 * blob_angle.cos(), s / 2.0 + s / 4.0 * blob_angle.sin());
        let radius = s / 6.0;
        for j in 0..per_class {
            let mut rng = seed::rng(seed::derive(seed_value, &[k as u64, j as u64]));
            let jitter = s / 16.0;
            let cx = bx + rng.gen_range(-jitter..=jitter);
            let cy = by + rng.gen_range(-jitter..=jitter);
            let phase = rng.gen_range(0.0..2.0 * PI);
            let mut px = Vec::with_capacity(image_size * image_size * 3);
            for y in 0..image_size {
                for x in 0..image_size {
                    let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
                    let t = (xf * theta.cos() + yf * theta.sin()) / s;
                    let stripe = 0.5 + 0.5 * (2.0 * PI * freq * t + phase).sin();
                    let d2 = (xf - cx).powi(2) + (yf - cy).powi(2);
                    let blob = (-d2 / (2.0 * radius * radius)).exp();
                    for c in color {
                        let v = c * (0.65 + 0.35 * stripe) + 0.35 * blob + noise.sample(&mut rng);
                        px.push(v.clamp(0.0, 1.0));
                    }
                }
            }
            items.push(Item {
                image: Image::new(image_size, image_size, 3, px)?,
                label: k,
                id: format!("class{k}/{j:05}"),
            });
        }
    }
    Ok(Dataset {
        items,
        n_classes,
        class_names: (0..n_classes).map(|k| format!("class{k}")).collect(),
        name: format!("synth-{n_classes}x{per_class}-{image_size}px-seed{seed_value}"),
    })
}

/// Seeded shuffle of `0..n_items` cut into batches. A trailing partial batch
/// is kept only when `keep_partial` is set (it is dropped in the contrastive
/// stages, which need at least two samples per batch).
pub fn batches(n_items: usize, batch_size: usize, epoch_seed: u64, keep_partial: bool) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..n_items).collect();
    order.shuffle(&mut seed::rng(epoch_seed));
    order
        .chunks(batch_size)
        .filter(|c| keep_partial || c.len() == batch_size)
        .map(|c| c.to_vec())
        .collect()
}
