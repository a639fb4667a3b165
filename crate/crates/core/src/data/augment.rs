use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::models::{CHANNELS, IMAGE_SIZE};

/// Random geometric transforms applied to training images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Horizontal shift range as a fraction of the image width.
    pub h_shift_frac: f32,
    pub v_shift_frac: f32,
    /// Zoom factor drawn from `1 ± zoom_frac`.
    pub zoom_frac: f32,
    pub hflip: bool,
    /// Rotation range in degrees, either direction.
    pub rot_deg: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: false,
            h_shift_frac: 0.10,
            v_shift_frac: 0.10,
            zoom_frac: 0.20,
            hflip: true,
            rot_deg: 5.0,
        }
    }
}

impl AugmentConfig {
    pub fn enabled() -> Self {
        AugmentConfig {
            enabled: true,
            ..Default::default()
        }
    }

    /// Transform that leaves every image untouched.
    pub fn identity() -> Self {
        AugmentConfig {
            enabled: true,
            h_shift_frac: 0.0,
            v_shift_frac: 0.0,
            zoom_frac: 0.0,
            hflip: false,
            rot_deg: 0.0,
        }
    }
}

fn symmetric(rng: &mut ChaCha8Rng, half_width: f32) -> f32 {
    if half_width > 0.0 {
        rng.random_range(-half_width..=half_width)
    } else {
        0.0
    }
}

/// Mirror an HWC image left to right.
pub fn hflip(img: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0; img.len()];
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let src = (y * IMAGE_SIZE + (IMAGE_SIZE - 1 - x)) * CHANNELS;
            let dst = (y * IMAGE_SIZE + x) * CHANNELS;
            out[dst..dst + CHANNELS].copy_from_slice(&img[src..src + CHANNELS]);
        }
    }
    out
}

/// Flip (p = 0.5), rotate, zoom and shift one 32×32×3 image, in that order.
///
/// Every output pixel is sampled bilinearly from the source through the
/// inverse transform; samples falling outside the image read 0.
pub fn augment(img: &[f32], cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    if !cfg.enabled {
        return img.to_vec();
    }
    let flip = cfg.hflip && rng.random_bool(0.5);
    let theta = symmetric(rng, cfg.rot_deg).to_radians();
    let zoom = 1.0 + symmetric(rng, cfg.zoom_frac);
    let size = IMAGE_SIZE as f32;
    let tx = symmetric(rng, cfg.h_shift_frac * size);
    let ty = symmetric(rng, cfg.v_shift_frac * size);

    warp(img, flip, theta, zoom, tx, ty)
}

fn warp(img: &[f32], flip: bool, theta: f32, zoom: f32, tx: f32, ty: f32) -> Vec<f32> {
    let src = if flip { hflip(img) } else { img.to_vec() };
    let c = (IMAGE_SIZE as f32 - 1.0) / 2.0;
    let (sin, cos) = theta.sin_cos();
    let mut out = vec![0.0; img.len()];
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            // undo shift, zoom and rotation about the centre
            let (u, v) = ((x as f32 - tx - c) / zoom, (y as f32 - ty - c) / zoom);
            let sx = cos * u + sin * v + c;
            let sy = -sin * u + cos * v + c;
            let dst = (y * IMAGE_SIZE + x) * CHANNELS;
            for ch in 0..CHANNELS {
                out[dst + ch] = bilinear(&src, sx, sy, ch).clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn bilinear(img: &[f32], sx: f32, sy: f32, ch: usize) -> f32 {
    let (x0, y0) = (sx.floor(), sy.floor());
    let (fx, fy) = (sx - x0, sy - y0);
    let at = |x: f32, y: f32| -> f32 {
        if x < 0.0 || y < 0.0 || x >= IMAGE_SIZE as f32 || y >= IMAGE_SIZE as f32 {
            0.0
        } else {
            img[(y as usize * IMAGE_SIZE + x as usize) * CHANNELS + ch]
        }
    };
    let top = at(x0, y0) * (1.0 - fx) + if fx > 0.0 { at(x0 + 1.0, y0) * fx } else { 0.0 };
    if fy == 0.0 {
        return top;
    }
    let bottom = at(x0, y0 + 1.0) * (1.0 - fx) + if fx > 0.0 { at(x0 + 1.0, y0 + 1.0) * fx } else { 0.0 };
    top * (1.0 - fy) + bottom * fy
}
