//! Synthetic grayscale shape datasets, deterministic splits, and dataset
//! directories on disk.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{load_labels, load_tensor, save_labels, save_tensor};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Images with one class index each.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    /// `N×H×W×C`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledSet {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.ndim() < 2 || images.rows() != labels.len() {
            return Err(Error::validation(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::validation(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(LabeledSet {
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

    pub fn subset(&self, indices: &[usize]) -> Result<LabeledSet> {
        LabeledSet::new(
            self.images.select_rows(indices)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
        )
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Shape families, in class-index order.
pub const SHAPE_FAMILIES: [&str; 8] = [
    "disk", "ring", "bar", "cross", "checker", "gradient", "triangle", "frame",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub per_class: usize,
    /// Height and width in pixels.
    pub image_size: usize,
    pub labeled_fraction: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    pub seed: Option<u64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 4,
            per_class: 500,
            image_size: 16,
            labeled_fraction: 0.05,
            noise: 0.1,
            seed: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::validation("num_classes must be at least 2"));
        }
        if self.num_classes > SHAPE_FAMILIES.len() {
            return Err(Error::validation(format!(
                "num_classes {} exceeds the {} available shape families",
                self.num_classes,
                SHAPE_FAMILIES.len()
            )));
        }
        if self.per_class == 0 || self.image_size == 0 {
            return Err(Error::validation("per_class and image_size must be positive"));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::validation("labeled_fraction must be in (0, 1]"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::validation("noise must be >= 0"));
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn input_dim(&self) -> usize {
        self.image_size * self.image_size
    }
}

/// Indices into the generated corpus for each split.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplitIndices {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub labeled: LabeledSet,
    /// `None` when every training example is labeled.
    pub unlabeled: Option<Tensor>,
    pub val: LabeledSet,
    pub test: LabeledSet,
    pub num_classes: usize,
    pub indices: SplitIndices,
}

/// Signed distance to an axis-aligned box with half extents `(hx, hy)`.
fn box_distance(u: f64, v: f64, hx: f64, hy: f64) -> f64 {
    let dx = u.abs() - hx;
    let dy = v.abs() - hy;
    let outside = (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
    outside + dx.max(dy).min(0.0)
}

/// Signed distance to an equilateral triangle of circumradius `r`, pointing up.
fn triangle_distance(u: f64, v: f64, r: f64) -> f64 {
    // Max over the three edge half-planes; exact enough for one-pixel antialiasing.
    (0..3)
        .map(|k| {
            let a = PI / 2.0 + 2.0 * PI * k as f64 / 3.0 + PI / 3.0;
            u * a.cos() + v * a.sin() - r / 2.0
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Pixel coverage in `[0, 1]` from a signed distance in pixels.
fn coverage(d: f64) -> f64 {
    (0.5 - d).clamp(0.0, 1.0)
}

struct ShapeParams {
    cx: f64,
    cy: f64,
    radius: f64,
    angle: f64,
    foreground: f64,
    background: f64,
}

fn render(class: usize, size: usize, p: &ShapeParams, noise: f64, rng: &mut Rng) -> Vec<f64> {
    let (sin, cos) = p.angle.sin_cos();
    let r = p.radius;
    let thickness = (0.22 * r).max(0.9);
    let mut out = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let (x, y) = (j as f64 + 0.5 - p.cx, i as f64 + 0.5 - p.cy);
            let u = cos * x + sin * y;
            let v = -sin * x + cos * y;
            let ink = match SHAPE_FAMILIES[class] {
                "disk" => coverage((u * u + v * v).sqrt() - r),
                "ring" => coverage(((u * u + v * v).sqrt() - r).abs() - thickness / 2.0),
                "bar" => coverage(box_distance(u, v, r, 0.3 * r)),
                "cross" => coverage(
                    box_distance(u, v, r, thickness / 2.0).min(box_distance(u, v, thickness / 2.0, r)),
                ),
                "checker" => {
                    let cell = r / 2.0;
                    let parity = ((u / cell).floor() + (v / cell).floor()).rem_euclid(2.0);
                    coverage(box_distance(u, v, r, r)) * parity
                }
                "gradient" => (0.5 + 0.5 * (u / (2.0 * r)).clamp(-1.0, 1.0)).clamp(0.0, 1.0),
                "triangle" => coverage(triangle_distance(u, v, 1.3 * r)),
                "frame" => coverage(box_distance(u, v, r, r).abs() - thickness / 2.0),
                _ => unreachable!("validated class index"),
            };
            let value = p.background + (p.foreground - p.background) * ink + noise * rng.normal();
            out.push(value.clamp(0.0, 1.0));
        }
    }
    out
}

/// Renders one example of `class` from its own random stream.
pub fn render_example(class: usize, size: usize, noise: f64, rng: &mut Rng) -> Vec<f64> {
    let s = size as f64;
    let params = ShapeParams {
        cx: s * rng.uniform_in(0.35, 0.65),
        cy: s * rng.uniform_in(0.35, 0.65),
        radius: s * rng.uniform_in(0.18, 0.3),
        angle: rng.uniform_in(0.0, PI),
        foreground: rng.uniform_in(0.7, 1.0),
        background: rng.uniform_in(0.0, 0.2),
    };
    render(class, size, &params, noise, rng)
}

fn split_sizes(n: usize, labeled_fraction: f64) -> (usize, usize, usize, usize) {
    let train = (0.7 * n as f64).round() as usize;
    let val = (0.1 * n as f64).round() as usize;
    let test = n - train - val;
    let labeled = ((labeled_fraction * train as f64).round() as usize).clamp(1, train);
    (labeled, train - labeled, val, test)
}

/// Generates `num_classes × per_class` images and splits them 70/10/20 into
/// train/val/test, with train further split into labeled and unlabeled.
pub fn synth_generate(cfg: &SynthConfig) -> Result<DatasetBundle> {
    cfg.validate()?;
    let seed = cfg.seed();
    let n = cfg.num_classes * cfg.per_class;
    let size = cfg.image_size;
    let root = Rng::new(seed);
    let render_root = root.derive(1);
    let labels: Vec<usize> = (0..n).map(|i| i % cfg.num_classes).collect();
    let mut pixels = Vec::with_capacity(n * size * size);
    for (i, &class) in labels.iter().enumerate() {
        pixels.extend(render_example(class, size, cfg.noise, &mut render_root.derive(i as u64)));
    }
    let corpus = LabeledSet::new(Tensor::new(vec![n, size, size, 1], pixels)?, labels, cfg.num_classes)?;

    let (n_labeled, n_unlabeled, n_val, _) = split_sizes(n, cfg.labeled_fraction);
    let order = root.derive(2).permutation(n);
    let (labeled, rest) = order.split_at(n_labeled);
    let (unlabeled, rest) = rest.split_at(n_unlabeled);
    let (val, test) = rest.split_at(n_val);
    if val.is_empty() || test.is_empty() {
        return Err(Error::validation(format!(
            "{n} examples are too few for non-empty validation and test splits"
        )));
    }
    let indices = SplitIndices {
        labeled: labeled.to_vec(),
        unlabeled: unlabeled.to_vec(),
        val: val.to_vec(),
        test: test.to_vec(),
    };
    Ok(DatasetBundle {
        labeled: corpus.subset(&indices.labeled)?,
        unlabeled: if unlabeled.is_empty() {
            None
        } else {
            Some(corpus.images.select_rows(unlabeled)?)
        },
        val: corpus.subset(&indices.val)?,
        test: corpus.subset(&indices.test)?,
        num_classes: cfg.num_classes,
        indices,
    })
}

/// Accuracy of assigning each test image to the class with the nearest mean
/// training image.
pub fn nearest_centroid_accuracy(train: &LabeledSet, test: &LabeledSet) -> f64 {
    let width = train.images.numel() / train.len();
    let mut centroids = vec![vec![0.0; width]; train.num_classes];
    let counts = train.class_counts();
    for (i, &l) in train.labels.iter().enumerate() {
        for (c, v) in centroids[l].iter_mut().zip(train.images.row(i)) {
            *c += v / counts[l] as f64;
        }
    }
    let correct = (0..test.len())
        .filter(|&i| {
            let x = test.images.row(i);
            let dist: Vec<f64> = centroids
                .iter()
                .map(|c| -c.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                .collect();
            crate::tensor::argmax(&dist) == test.labels[i]
        })
        .count();
    correct as f64 / test.len() as f64
}

/// File names inside a dataset directory.
pub mod files {
    pub const LABELED_IMAGES: &str = "labeled_images.tnsr";
    pub const LABELED_LABELS: &str = "labeled_labels.lbls";
    pub const UNLABELED_IMAGES: &str = "unlabeled_images.tnsr";
    pub const VAL_IMAGES: &str = "val_images.tnsr";
    pub const VAL_LABELS: &str = "val_labels.lbls";
    pub const TEST_IMAGES: &str = "test_images.tnsr";
    pub const TEST_LABELS: &str = "test_labels.lbls";
}

/// Writes every split of the bundle and returns the file names written.
pub fn save_bundle(dir: impl AsRef<Path>, bundle: &DatasetBundle) -> Result<Vec<&'static str>> {
    let dir = dir.as_ref();
    let mut written = Vec::new();
    let mut pair = |set: &LabeledSet, images: &'static str, labels: &'static str| -> Result<()> {
        save_tensor(dir.join(images), &set.images)?;
        save_labels(dir.join(labels), &set.labels)?;
        written.extend([images, labels]);
        Ok(())
    };
    pair(&bundle.labeled, files::LABELED_IMAGES, files::LABELED_LABELS)?;
    pair(&bundle.val, files::VAL_IMAGES, files::VAL_LABELS)?;
    pair(&bundle.test, files::TEST_IMAGES, files::TEST_LABELS)?;
    if let Some(unlabeled) = &bundle.unlabeled {
        save_tensor(dir.join(files::UNLABELED_IMAGES), unlabeled)?;
        written.push(files::UNLABELED_IMAGES);
    }
    Ok(written)
}

/// Loads one labeled split from an image tensor file and a labels file.
pub fn load_labeled(images: impl AsRef<Path>, labels: impl AsRef<Path>, num_classes: usize) -> Result<LabeledSet> {
    LabeledSet::new(load_tensor(images)?, load_labels(labels)?, num_classes)
}

/// Loads a dataset directory laid out as [`files`]; the unlabeled file is optional.
/// Any directory of tensor files with matching label files works, not only
/// generated ones.
pub fn load_bundle(dir: impl AsRef<Path>, num_classes: usize) -> Result<DatasetBundle> {
    let dir = dir.as_ref();
    let labeled = load_labeled(dir.join(files::LABELED_IMAGES), dir.join(files::LABELED_LABELS), num_classes)?;
    let val = load_labeled(dir.join(files::VAL_IMAGES), dir.join(files::VAL_LABELS), num_classes)?;
    let test = load_labeled(dir.join(files::TEST_IMAGES), dir.join(files::TEST_LABELS), num_classes)?;
    let unlabeled_path = dir.join(files::UNLABELED_IMAGES);
    let unlabeled = if unlabeled_path.exists() {
        Some(load_tensor(unlabeled_path)?)
    } else {
        None
    };
    Ok(DatasetBundle {
        labeled,
        unlabeled,
        val,
        test,
        num_classes,
        indices: SplitIndices::default(),
    })
}
