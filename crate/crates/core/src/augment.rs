//! Stochastic image augmentation producing the two views fed to the online
//! and target networks.
//!
//! Images are `H×W×C` tensors with values in `[0, 1]`. The pipeline is, in
//! order: random resized crop, horizontal flip, brightness shift, contrast
//! scale about the image mean, additive Gaussian noise, clamp to `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    /// Smallest crop area as a fraction of the image, in `(0, 1]`.
    pub crop_min_fraction: f64,
    pub flip_probability: f64,
    pub brightness_delta: f64,
    pub contrast_range: (f64, f64),
    pub noise_sigma: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            crop_min_fraction: 0.6,
            flip_probability: 0.5,
            brightness_delta: 0.2,
            contrast_range: (0.8, 1.2),
            noise_sigma: 0.02,
        }
    }
}

impl AugmentationConfig {
    /// Every stage disabled; `augment` returns its input unchanged.
    pub fn neutral() -> Self {
        AugmentationConfig {
            crop_min_fraction: 1.0,
            flip_probability: 0.0,
            brightness_delta: 0.0,
            contrast_range: (1.0, 1.0),
            noise_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.contrast_range;
        let problems = [
            (
                !(self.crop_min_fraction > 0.0 && self.crop_min_fraction <= 1.0),
                "crop_min_fraction must be in (0, 1]",
            ),
            (
                !(0.0..=1.0).contains(&self.flip_probability),
                "flip_probability must be in [0, 1]",
            ),
            (
                !(self.brightness_delta >= 0.0 && self.brightness_delta.is_finite()),
                "brightness_delta must be >= 0",
            ),
            (
                !(lo > 0.0 && lo <= hi && hi.is_finite()),
                "contrast_range must be positive with low <= high",
            ),
            (
                !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()),
                "noise_sigma must be >= 0",
            ),
        ];
        match problems.iter().find(|(bad, _)| *bad) {
            Some((_, msg)) => Err(Error::validation(*msg)),
            None => Ok(()),
        }
    }
}

fn image_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::validation(format!(
            "expected an H×W×C image, got shape {:?}",
            x.shape()
        ))),
    }
}

/// Crop window in pixel coordinates: `(top, left, height, width)`.
type Window = (f64, f64, f64, f64);

fn sample_window(h: usize, w: usize, min_fraction: f64, rng: &mut Rng) -> Window {
    let (hf, wf) = (h as f64, w as f64);
    if min_fraction >= 1.0 {
        return (0.0, 0.0, hf, wf);
    }
    let area = rng.uniform_in(min_fraction, 1.0) * hf * wf;
    let log_ratio = rng.uniform_in((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    let ratio = log_ratio.exp();
    let (mut ch, mut cw) = ((area / ratio).sqrt(), (area * ratio).sqrt());
    if ch > hf || cw > wf {
        // Fall back to the image's own aspect ratio, which always fits.
        let s = (area / (hf * wf)).sqrt();
        ch = s * hf;
        cw = s * wf;
    }
    let top = rng.uniform() * (hf - ch);
    let left = rng.uniform() * (wf - cw);
    (top, left, ch, cw)
}

fn resize_crop(x: &Tensor, (h, w, c): (usize, usize, usize), window: Window) -> Tensor {
    let (top, left, ch, cw) = window;
    let src = x.data();
    let mut out = Tensor::zeros(&[h, w, c]);
    let dst = out.data_mut();
    for i in 0..h {
        let sy = (top + (i as f64 + 0.5) * ch / h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for j in 0..w {
            let sx = (left + (j as f64 + 0.5) * cw / w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for k in 0..c {
                let at = |yy: usize, xx: usize| src[(yy * w + xx) * c + k];
                let top_row = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom_row = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                dst[(i * w + j) * c + k] = top_row * (1.0 - fy) + bottom_row * fy;
            }
        }
    }
    out
}

fn flip_horizontal(x: &mut Tensor, (h, w, c): (usize, usize, usize)) {
    let data = x.data_mut();
    for i in 0..h {
        for j in 0..w / 2 {
            for k in 0..c {
                data.swap((i * w + j) * c + k, (i * w + (w - 1 - j)) * c + k);
            }
        }
    }
}

/// One stochastic view of `x`. Deterministic given the state of `rng`.
pub fn augment(x: &Tensor, cfg: &AugmentationConfig, rng: &mut Rng) -> Result<Tensor> {
    cfg.validate()?;
    let dims = image_dims(x)?;
    if let Some(bad) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::validation(format!("pixel value {bad} outside [0, 1]")));
    }
    let (h, w, _) = dims;

    let window = sample_window(h, w, cfg.crop_min_fraction, rng);
    let full = window.2 == h as f64 && window.3 == w as f64;
    let mut out = if full {
        x.clone()
    } else {
        resize_crop(x, dims, window)
    };

    if rng.uniform() < cfg.flip_probability {
        flip_horizontal(&mut out, dims);
    }

    let shift = rng.uniform_in(-cfg.brightness_delta, cfg.brightness_delta);
    if shift != 0.0 {
        out.data_mut().iter_mut().for_each(|v| *v += shift);
    }

    let (lo, hi) = cfg.contrast_range;
    let contrast = rng.uniform_in(lo, hi);
    if contrast != 1.0 {
        let mean = out.sum() / out.numel() as f64;
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = mean + contrast * (*v - mean));
    }

    if cfg.noise_sigma > 0.0 {
        for v in out.data_mut() {
            *v += cfg.noise_sigma * rng.normal();
        }
    }

    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

/// Two independent views of the same image, drawn from disjoint child streams.
pub fn make_view_pair(x: &Tensor, cfg: &AugmentationConfig, rng: &Rng) -> Result<(Tensor, Tensor)> {
    let v = augment(x, cfg, &mut rng.derive(0))?;
    let v_prime = augment(x, cfg, &mut rng.derive(1))?;
    Ok((v, v_prime))
}
