use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::idx::{read_images, read_labels, write_images, write_labels};
use super::{DomainDataset, Instance};
use crate::error::{Error, Result};
use crate::rng::seeded;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Standard file pairs inside an MNIST directory.
pub fn mnist_sources(dir: &Path, include_test: bool) -> Vec<(PathBuf, PathBuf)> {
    let mut out = vec![(dir.join(TRAIN_IMAGES), dir.join(TRAIN_LABELS))];
    if include_test {
        out.push((dir.join(TEST_IMAGES), dir.join(TEST_LABELS)));
    }
    out
}

/// Writes MNIST-shaped IDX files with procedurally drawn 28×28 digits
/// (a digit-specific stroke plus speckle). Useful offline, where the real
/// files are unavailable; label statistics match a uniform digit draw.
pub fn write_surrogate_mnist(dir: &Path, train: usize, test: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut rng = seeded(seed);
    for (n, img_name, lbl_name) in [(train, TRAIN_IMAGES, TRAIN_LABELS), (test, TEST_IMAGES, TEST_LABELS)] {
        let mut pixels = vec![0u8; n * 784];
        let mut labels = Vec::with_capacity(n);
        for (i, img) in pixels.chunks_mut(784).enumerate() {
            let digit = rng.random_range(0..10u8);
            labels.push(digit);
            let row = 4 + 2 * usize::from(digit) + rng.random_range(0..2);
            for c in 6..22 {
                img[row * 28 + c] = 200 + rng.random_range(0..56u8);
                img[(row + 1) * 28 + c] = 150;
            }
            let col = 4 + (i + usize::from(digit) * 7) % 20;
            for r in 4..24 {
                img[r * 28 + col] = img[r * 28 + col].max(rng.random_range(0..256u16) as u8);
            }
        }
        write_images(&dir.join(img_name), 28, 28, &pixels)?;
        write_labels(&dir.join(lbl_name), &labels)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColoredMnistOptions {
    /// Side of the square average-pooling window (1 keeps full resolution).
    pub pool: usize,
    pub label_noise: f64,
    /// Per-domain probability that the color disagrees with the label.
    pub color_flip: Vec<f64>,
}

impl Default for ColoredMnistOptions {
    fn default() -> Self {
        Self {
            pool: 2,
            label_noise: 0.25,
            color_flip: vec![0.1, 0.2, 0.9],
        }
    }
}

/// Built dataset plus per-instance provenance: the source digit and the
/// color channel (0 = red, 1 = green).
#[derive(Clone, Debug, PartialEq)]
pub struct ColoredMnist {
    pub dataset: DomainDataset,
    pub digits: Vec<u8>,
    pub colors: Vec<u8>,
}

impl ColoredMnist {
    pub fn flip_rate(&self) -> f64 {
        let flipped = self
            .dataset
            .instances
            .iter()
            .zip(&self.digits)
            .filter(|(inst, &d)| inst.y != usize::from(d >= 5))
            .count();
        flipped as f64 / self.digits.len() as f64
    }

    /// Fraction of instances in `domain` whose color equals their label.
    pub fn color_agreement(&self, domain: usize) -> f64 {
        let mut agree = 0usize;
        let mut total = 0usize;
        for (inst, &c) in self.dataset.instances.iter().zip(&self.colors) {
            if inst.domain == domain {
                total += 1;
                agree += usize::from(inst.y == usize::from(c));
            }
        }
        agree as f64 / total as f64
    }
}

fn pool_image(img: &[u8], rows: usize, cols: usize, k: usize) -> Vec<f64> {
    let (pr, pc) = (rows / k, cols / k);
    let mut out = Vec::with_capacity(pr * pc);
    let norm = 255.0 * (k * k) as f64;
    for i in 0..pr {
        for j in 0..pc {
            let mut s = 0u32;
            for di in 0..k {
                for dj in 0..k {
                    s += u32::from(img[(i * k + di) * cols + j * k + dj]);
                }
            }
            out.push(f64::from(s) / norm);
        }
    }
    out
}

pub fn build_colored_mnist(images: &Path, labels: &Path, seed: u64) -> Result<ColoredMnist> {
    build_colored_mnist_from(
        &[(images.to_path_buf(), labels.to_path_buf())],
        seed,
        &ColoredMnistOptions::default(),
    )
}

/// Concatenates every `(images, labels)` source, shuffles, deals instances
/// round-robin into domains, then per instance: binarizes the digit
/// (`0–4 → 0`, `5–9 → 1`), flips the label with probability `label_noise`,
/// and colors the strokes to match the (possibly flipped) label except
/// with the domain's `color_flip` probability.
pub fn build_colored_mnist_from(
    sources: &[(PathBuf, PathBuf)],
    seed: u64,
    opts: &ColoredMnistOptions,
) -> Result<ColoredMnist> {
    if opts.pool == 0 || opts.color_flip.is_empty() {
        return Err(Error::Config(
            "colored MNIST needs pool ≥ 1 and at least one domain".into(),
        ));
    }
    let mut raw: Vec<(Vec<f64>, u8)> = Vec::new();
    let mut plane = None;
    for (img_path, lbl_path) in sources {
        let images = read_images(img_path)?;
        let labels = read_labels(lbl_path)?;
        if images.count != labels.len() {
            return Err(Error::Idx {
                path: lbl_path.display().to_string(),
                reason: format!("{} labels for {} images", labels.len(), images.count),
            });
        }
        if images.rows % opts.pool != 0 || images.cols % opts.pool != 0 {
            return Err(Error::Config(format!(
                "{}×{} images are not divisible by pool {}",
                images.rows, images.cols, opts.pool
            )));
        }
        let p = (images.rows / opts.pool) * (images.cols / opts.pool);
        if *plane.get_or_insert(p) != p {
            return Err(Error::Idx {
                path: img_path.display().to_string(),
                reason: "image size differs from earlier sources".into(),
            });
        }
        for (i, &digit) in labels.iter().enumerate() {
            if digit > 9 {
                return Err(Error::Idx {
                    path: lbl_path.display().to_string(),
                    reason: format!("label {digit} at index {i} is not a digit"),
                });
            }
            raw.push((pool_image(images.image(i), images.rows, images.cols, opts.pool), digit));
        }
    }
    let plane = plane.ok_or_else(|| Error::Empty("colored MNIST sources".into()))?;

    let mut rng = seeded(seed);
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.shuffle(&mut rng);
    let n_domains = opts.color_flip.len();

    let mut instances = Vec::with_capacity(raw.len());
    let mut digits = Vec::with_capacity(raw.len());
    let mut colors = Vec::with_capacity(raw.len());
    for (pos, &src) in order.iter().enumerate() {
        let domain = pos % n_domains;
        let (gray, digit) = &raw[src];
        let mut y = usize::from(*digit >= 5);
        if rng.random_bool(opts.label_noise) {
            y = 1 - y;
        }
        let color = if rng.random_bool(opts.color_flip[domain]) {
            1 - y
        } else {
            y
        };
        let mut x = vec![0.0; 2 * plane];
        x[color * plane..(color + 1) * plane].copy_from_slice(gray);
        instances.push(Instance {
            x,
            y,
            domain,
            latent_s: None,
            latent_v: None,
        });
        digits.push(*digit);
        colors.push(color as u8);
    }
    Ok(ColoredMnist {
        dataset: DomainDataset::new("colored_mnist", instances, 2, (0..n_domains).collect())?,
        digits,
        colors,
    })
}
