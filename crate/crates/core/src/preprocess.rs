//! Radiograph preprocessing: grayscale decode, channel replication, bilinear
//! resize, normalization, and restrained training-time augmentation
//! (horizontal flip, small rotation).

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::tape::Mode;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// A decoded grayscale radiograph with intensities in [0, 1].
#[derive(Debug, Clone)]
pub struct RawRadiograph {
    pub pixels: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub path: PathBuf,
}

impl RawRadiograph {
    pub fn from_pixels(pixels: Vec<f32>, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::Input(format!(
                "pixel buffer {} does not match {height}x{width}",
                pixels.len()
            )));
        }
        if pixels.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Input("raw intensities must lie in [0, 1]".into()));
        }
        Ok(Self {
            pixels,
            height,
            width,
            path: PathBuf::new(),
        })
    }

    /// Decodes an 8- or 16-bit grayscale PNG, scaling by the max
    /// representable value. Color inputs are collapsed to luma.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Data(format!("cannot decode {}: {e}", path.display())))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let pixels: Vec<f32> = match img {
            image::DynamicImage::ImageLuma16(buf) => buf
                .into_raw()
                .into_iter()
                .map(|v| v as f32 / u16::MAX as f32)
                .collect(),
            image::DynamicImage::ImageRgb16(_) | image::DynamicImage::ImageRgba16(_) => img
                .into_luma16()
                .into_raw()
                .into_iter()
                .map(|v| v as f32 / u16::MAX as f32)
                .collect(),
            other => other
                .into_luma8()
                .into_raw()
                .into_iter()
                .map(|v| v as f32 / u8::MAX as f32)
                .collect(),
        };
        let mut raw = Self::from_pixels(pixels, h, w)?;
        raw.path = path.to_path_buf();
        Ok(raw)
    }
}

/// Training-time augmentation knobs; both off means identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub max_rotation_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            max_rotation_deg: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub target_size: usize,
    pub mean: f32,
    pub std: f32,
    pub augment: AugmentConfig,
}

impl PreprocessConfig {
    /// Default normalization maps [0, 1] onto [−1, 1].
    pub fn for_target(target_size: usize) -> Self {
        Self {
            target_size,
            mean: 0.5,
            std: 0.5,
            augment: AugmentConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_size == 0 {
            return Err(Error::Parameter("target size must be positive".into()));
        }
        if self.std <= 0.0 {
            return Err(Error::Parameter("normalization std must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.augment.flip_prob) {
            return Err(Error::Parameter("flip probability must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// out[c] = img for all three channels.
pub fn replicate_channels(img: &RawRadiograph) -> Tensor<f32> {
    let (h, w) = (img.height, img.width);
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        data.extend_from_slice(&img.pixels);
    }
    Tensor::new(vec![3, h, w], data).expect("replicated buffer matches shape")
}

/// Bilinear resize to S×S. Sample centers follow the half-pixel convention
/// ((i + 0.5)·scale − 0.5) with edge clamping, so constant images stay
/// constant and same-size resize is exact.
pub fn resize_bilinear(img: &Tensor<f32>, target: usize) -> Result<Tensor<f32>> {
    let shape = img.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Dimension(format!(
            "resize expects [3, h, w], got {shape:?}"
        )));
    }
    if target == 0 {
        return Err(Error::Parameter("resize target must be >= 1".into()));
    }
    let (h, w) = (shape[1], shape[2]);
    let scale_y = h as f64 / target as f64;
    let scale_x = w as f64 / target as f64;
    let mut out = vec![0.0f32; 3 * target * target];
    for c in 0..3 {
        let plane = &img.data()[c * h * w..(c + 1) * h * w];
        for oy in 0..target {
            let sy = ((oy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = (sy - y0 as f64) as f32;
            for ox in 0..target {
                let sx = ((ox as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = (sx - x0 as f64) as f32;
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out[c * target * target + oy * target + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(vec![3, target, target], out)
}

/// (x − mean) / std elementwise.
pub fn normalize(img: &Tensor<f32>, mean: f32, std: f32) -> Result<Tensor<f32>> {
    if std <= 0.0 {
        return Err(Error::Parameter(format!(
            "normalization std must be > 0, got {std}"
        )));
    }
    Ok(img.map(|v| (v - mean) / std))
}

/// Mirrors each channel left-right. An exact involution.
pub fn hflip(img: &Tensor<f32>) -> Tensor<f32> {
    let shape = img.shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let mut out = img.data().to_vec();
    for c in 0..3 {
        for y in 0..h {
            let row = c * h * w + y * w;
            out[row..row + w].reverse();
        }
    }
    Tensor::new(shape, out).expect("flip preserves shape")
}

/// Rotates around the image center by `angle_rad` with bilinear resampling;
/// samples falling outside the source are filled with zero. A zero angle is
/// an exact identity.
pub fn rotate_bilinear(img: &Tensor<f32>, angle_rad: f64) -> Tensor<f32> {
    let shape = img.shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let (sin, cos) = angle_rad.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = vec![0.0f32; 3 * h * w];
    for c in 0..3 {
        let plane = &img.data()[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                // inverse rotation of the destination coordinate
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let sy = cy + dy * cos - dx * sin;
                let sx = cx + dy * sin + dx * cos;
                if sy < -0.5 || sx < -0.5 || sy > (h as f64 - 0.5) || sx > (w as f64 - 0.5) {
                    continue;
                }
                let y0f = sy.floor();
                let x0f = sx.floor();
                let fy = (sy - y0f) as f32;
                let fx = (sx - x0f) as f32;
                let sample = |yy: f64, xx: f64| -> f32 {
                    if yy < 0.0 || xx < 0.0 || yy > (h - 1) as f64 || xx > (w - 1) as f64 {
                        0.0
                    } else {
                        plane[yy as usize * w + xx as usize]
                    }
                };
                let top = sample(y0f, x0f) * (1.0 - fx) + sample(y0f, x0f + 1.0) * fx;
                let bot = sample(y0f + 1.0, x0f) * (1.0 - fx) + sample(y0f + 1.0, x0f + 1.0) * fx;
                out[c * h * w + y * w + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(shape, out).expect("rotation preserves shape")
}

/// Training augmentation: flip with `flip_prob`, then rotate by an angle
/// uniform in ±max_rotation_deg. Deterministic under rng replay.
pub fn augment(img: &Tensor<f32>, cfg: &AugmentConfig, rng: &mut RngStream) -> Tensor<f32> {
    let flip = rng.next_f64() < cfg.flip_prob;
    let angle_deg = (rng.next_f64() * 2.0 - 1.0) * cfg.max_rotation_deg;
    let flipped = if flip { hflip(img) } else { img.clone() };
    if angle_deg == 0.0 {
        flipped
    } else {
        rotate_bilinear(&flipped, angle_deg.to_radians())
    }
}

/// Full pipeline: replicate → resize → (augment in train mode) → normalize.
pub fn preprocess_image(
    raw: &RawRadiograph,
    cfg: &PreprocessConfig,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<Tensor<f32>> {
    cfg.validate()?;
    let replicated = replicate_channels(raw);
    let resized = resize_bilinear(&replicated, cfg.target_size)?;
    let staged = match mode {
        Mode::Train => augment(&resized, &cfg.augment, rng),
        Mode::Eval => resized,
    };
    normalize(&staged, cfg.mean, cfg.std)
}
