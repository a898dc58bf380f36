//! Augmentation used to synthesize anchor images from reference images,
//! approximating how products look when cropped out of shelf photos:
//! Gaussian blur, random crop, brightness and saturation jitter.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::img;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub blur_prob: f32,
    /// Blur sigma sampled uniformly from this range, in pixels.
    pub blur_sigma: (f32, f32),
    pub crop_prob: f32,
    /// Minimum retained fraction per side. Values >= 1 disable cropping.
    pub crop_min: f32,
    pub brightness_prob: f32,
    pub brightness: (f32, f32),
    pub saturation_prob: f32,
    pub saturation: (f32, f32),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            blur_prob: 0.5,
            blur_sigma: (0.5, 2.0),
            crop_prob: 0.7,
            crop_min: 0.8,
            brightness_prob: 0.7,
            brightness: (0.6, 1.4),
            saturation_prob: 0.7,
            saturation: (0.6, 1.4),
        }
    }
}

impl AugmentConfig {
    /// Configuration under which `augment` is the identity.
    pub fn identity() -> Self {
        AugmentConfig {
            blur_prob: 0.0,
            crop_prob: 0.0,
            brightness_prob: 0.0,
            saturation_prob: 0.0,
            ..AugmentConfig::default()
        }
    }
}

/// Applies the configured distortions in a fixed order (blur, crop,
/// brightness, saturation), each gated by its own probability draw.
/// Deterministic given the generator state; output stays in `[0, 1]`.
pub fn augment(image: &Tensor, rng: &mut impl Rng, cfg: &AugmentConfig) -> Result<Tensor> {
    let (w, h) = img::image_dims(image)?;
    let mut out = image.clone();

    if cfg.blur_prob > 0.0 && rng.random::<f32>() < cfg.blur_prob {
        let sigma = sample_range(rng, cfg.blur_sigma);
        out = gaussian_blur(&out, sigma)?;
    }

    if cfg.crop_prob > 0.0 && cfg.crop_min < 1.0 && rng.random::<f32>() < cfg.crop_prob {
        let keep_w = sample_range(rng, (cfg.crop_min, 1.0));
        let keep_h = sample_range(rng, (cfg.crop_min, 1.0));
        let cw = ((w as f32 * keep_w).round() as u32).clamp(1, w);
        let ch = ((h as f32 * keep_h).round() as u32).clamp(1, h);
        let x0 = rng.random_range(0..=w - cw);
        let y0 = rng.random_range(0..=h - ch);
        let cropped = img::crop(&out, img::Rect::new(x0, y0, cw, ch))?;
        out = img::resize_bilinear(&cropped, h as usize, w as usize)?;
    }

    if cfg.brightness_prob > 0.0 && rng.random::<f32>() < cfg.brightness_prob {
        let scale = sample_range(rng, cfg.brightness);
        for v in out.data_mut() {
            *v = (*v * scale).clamp(0.0, 1.0);
        }
    }

    if cfg.saturation_prob > 0.0 && rng.random::<f32>() < cfg.saturation_prob {
        let scale = sample_range(rng, cfg.saturation);
        scale_saturation(&mut out, scale);
    }

    Ok(out)
}

fn sample_range(rng: &mut impl Rng, (lo, hi): (f32, f32)) -> f32 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Separable Gaussian blur with replicated edges.
pub fn gaussian_blur(image: &Tensor, sigma: f32) -> Result<Tensor> {
    let (w, h) = img::image_dims(image)?;
    if sigma <= 0.0 {
        return Ok(image.clone());
    }
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut weights = Vec::with_capacity((2 * radius + 1) as usize);
    let s2 = 2.0 * (sigma as f64) * (sigma as f64);
    let mut total = 0.0f64;
    for i in -radius..=radius {
        let wgt = (-(i * i) as f64 / s2).exp();
        weights.push(wgt);
        total += wgt;
    }
    for wgt in &mut weights {
        *wgt /= total;
    }

    let (w, h) = (w as i64, h as i64);
    let d = image.data();
    let mut tmp = vec![0.0f32; d.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3usize {
                let mut acc = 0.0f64;
                for (wi, i) in (-radius..=radius).enumerate() {
                    let sx = (x + i).clamp(0, w - 1);
                    acc += weights[wi] * d[((y * w + sx) * 3) as usize + c] as f64;
                }
                tmp[((y * w + x) * 3) as usize + c] = acc as f32;
            }
        }
    }
    let mut out = vec![0.0f32; d.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3usize {
                let mut acc = 0.0f64;
                for (wi, i) in (-radius..=radius).enumerate() {
                    let sy = (y + i).clamp(0, h - 1);
                    acc += weights[wi] * tmp[((sy * w + x) * 3) as usize + c] as f64;
                }
                out[((y * w + x) * 3) as usize + c] = acc as f32;
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Moves each pixel toward (scale < 1) or away from (scale > 1) its
/// Rec. 601 luma.
fn scale_saturation(image: &mut Tensor, scale: f32) {
    for px in image.data_mut().chunks_exact_mut(3) {
        let luma = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
        for v in px {
            *v = (luma + scale * (*v - luma)).clamp(0.0, 1.0);
        }
    }
}
