//! Image decoding, resizing, normalisation and training-time augmentation.
//!
//! Tensors are height × width × 3, row-major, channel-interleaved. Pixel
//! centres sit at integer coordinates; resampling uses the half-pixel
//! convention (`src = (dst + 0.5) * in / out - 0.5`).

use serde::{Deserialize, Serialize};

use crate::rng::SplitMix64;

pub const CHANNELS: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("cannot decode image: {0}")]
    Decode(String),
    #[error("image has zero pixels")]
    Empty,
    #[error("target side must be positive")]
    ZeroSide,
    #[error("standard deviation for channel {0} must be positive")]
    ZeroStd(usize),
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(String),
    #[error("tensor data length {len} does not match {height}x{width}x3")]
    Shape { height: usize, width: usize, len: usize },
    #[error("cannot encode image: {0}")]
    Encode(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if data.len() != height * width * CHANNELS {
            return Err(ImageError::Shape { height, width, len: data.len() });
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * CHANNELS],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                for c in 0..CHANNELS {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Encode as 8-bit RGB PNG, clamping to `[0, 1]`.
    pub fn to_png(&self) -> Result<Vec<u8>, ImageError> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or(ImageError::Empty)?;
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| ImageError::Encode(e.to_string()))?;
        Ok(out.into_inner())
    }
}

/// Decode PNG or JPEG bytes and bilinearly resample to `side × side`.
/// Grayscale sources are replicated across the three channels.
pub fn decode_resize(bytes: &[u8], side: usize) -> Result<ImageTensor, ImageError> {
    if side == 0 {
        return Err(ImageError::ZeroSide);
    }
    let decoded = image::load_from_memory(bytes).map_err(|e| ImageError::Decode(e.to_string()))?;
    if decoded.width() == 0 || decoded.height() == 0 {
        return Err(ImageError::Empty);
    }
    let rgb = decoded.to_rgb32f();
    let src = ImageTensor::new(rgb.height() as usize, rgb.width() as usize, rgb.into_raw())?;
    Ok(resize_bilinear(&src, side, side))
}

fn source_coord(dst: usize, in_len: usize, out_len: usize) -> f64 {
    let s = (dst as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5;
    s.clamp(0.0, (in_len - 1) as f64)
}

/// Bilinear resampling with edge clamping.
pub fn resize_bilinear(src: &ImageTensor, out_h: usize, out_w: usize) -> ImageTensor {
    if src.height == out_h && src.width == out_w {
        return src.clone();
    }
    let xs: Vec<(usize, usize, f64)> = (0..out_w)
        .map(|x| {
            let s = source_coord(x, src.width, out_w);
            let x0 = s.floor() as usize;
            (x0, (x0 + 1).min(src.width - 1), s - x0 as f64)
        })
        .collect();
    let mut data = Vec::with_capacity(out_h * out_w * CHANNELS);
    for y in 0..out_h {
        let sy = source_coord(y, src.height, out_h);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(src.height - 1);
        let fy = sy - y0 as f64;
        for &(x0, x1, fx) in &xs {
            for c in 0..CHANNELS {
                let top = src.get(y0, x0, c) as f64 * (1.0 - fx) + src.get(y0, x1, c) as f64 * fx;
                let bot = src.get(y1, x0, c) as f64 * (1.0 - fx) + src.get(y1, x1, c) as f64 * fx;
                data.push((top * (1.0 - fy) + bot * fy) as f32);
            }
        }
    }
    ImageTensor { height: out_h, width: out_w, data }
}

/// Per-channel `(value - mean) / std`.
pub fn normalize(img: &ImageTensor, mean: [f32; 3], std: [f32; 3]) -> Result<ImageTensor, ImageError> {
    for (c, s) in std.iter().enumerate() {
        if !(*s > 0.0) {
            return Err(ImageError::ZeroStd(c));
        }
    }
    let data = img
        .data
        .chunks_exact(CHANNELS)
        .flat_map(|px| (0..CHANNELS).map(move |c| (px[c] - mean[c]) / std[c]))
        .collect();
    Ok(ImageTensor { height: img.height, width: img.width, data })
}

/// Inverse of [`normalize`].
pub fn denormalize(img: &ImageTensor, mean: [f32; 3], std: [f32; 3]) -> ImageTensor {
    let data = img
        .data
        .chunks_exact(CHANNELS)
        .flat_map(|px| (0..CHANNELS).map(move |c| px[c] * std[c] + mean[c]))
        .collect();
    ImageTensor { height: img.height, width: img.width, data }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip_x_prob: f64,
    pub flip_y_prob: f64,
    /// Rotation is drawn from `[-rotation_range_deg, +rotation_range_deg]`.
    pub rotation_range_deg: f64,
    /// Unitless shear factor bound, applied along both axes.
    pub shear_range: f64,
}

impl AugmentConfig {
    /// Reflections at 50%, ±10° rotation, ±0.3 shear.
    pub fn published() -> Self {
        Self {
            enabled: true,
            flip_x_prob: 0.5,
            flip_y_prob: 0.5,
            rotation_range_deg: 10.0,
            shear_range: 0.3,
        }
    }

    pub fn disabled() -> Self {
        Self {
            enabled: false,
            flip_x_prob: 0.0,
            flip_y_prob: 0.0,
            rotation_range_deg: 0.0,
            shear_range: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ImageError> {
        for (name, p) in [("flip_x_prob", self.flip_x_prob), ("flip_y_prob", self.flip_y_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ImageError::InvalidConfig(format!("{name} = {p} outside [0, 1]")));
            }
        }
        for (name, r) in [
            ("rotation_range_deg", self.rotation_range_deg),
            ("shear_range", self.shear_range),
        ] {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(ImageError::InvalidConfig(format!("{name} = {r} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// One concrete draw of augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Mirror left-right.
    pub flip_x: bool,
    /// Mirror top-bottom.
    pub flip_y: bool,
    pub rotation_deg: f64,
    pub shear_x: f64,
    pub shear_y: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        flip_x: false,
        flip_y: false,
        rotation_deg: 0.0,
        shear_x: 0.0,
        shear_y: 0.0,
    };

    /// Draw in the fixed order: x-flip, y-flip, rotation, x-shear, y-shear.
    /// Five draws are consumed regardless of the configured values.
    pub fn draw(cfg: &AugmentConfig, rng: &mut SplitMix64) -> Self {
        let flip_x = rng.bernoulli(cfg.flip_x_prob);
        let flip_y = rng.bernoulli(cfg.flip_y_prob);
        let r = cfg.rotation_range_deg;
        let rotation_deg = rng.uniform(-r, r);
        let s = cfg.shear_range;
        let shear_x = rng.uniform(-s, s);
        let shear_y = rng.uniform(-s, s);
        Self { flip_x, flip_y, rotation_deg, shear_x, shear_y }
    }

    /// Forward linear part acting on centred coordinates:
    /// `ShearY · ShearX · Rotation · Flip`.
    pub fn linear(&self) -> [[f64; 2]; 2] {
        let fx = if self.flip_x { -1.0 } else { 1.0 };
        let fy = if self.flip_y { -1.0 } else { 1.0 };
        let (sin, cos) = self.rotation_deg.to_radians().sin_cos();
        // Rotation · Flip
        let rf = [[cos * fx, -sin * fy], [sin * fx, cos * fy]];
        // ShearX = [[1, sx], [0, 1]]
        let sxm = [
            [rf[0][0] + self.shear_x * rf[1][0], rf[0][1] + self.shear_x * rf[1][1]],
            rf[1],
        ];
        // ShearY = [[1, 0], [sy, 1]]
        [
            sxm[0],
            [sxm[1][0] + self.shear_y * sxm[0][0], sxm[1][1] + self.shear_y * sxm[0][1]],
        ]
    }

    /// Inverse map as a 2×3 affine matrix taking output pixel coordinates
    /// `(x, y, 1)` to the source coordinates sampled for that pixel. The warp
    /// is centred on `((w-1)/2, (h-1)/2)`.
    pub fn inverse_affine(&self, height: usize, width: usize) -> [[f64; 3]; 2] {
        let m = self.linear();
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
        let cx = (width as f64 - 1.0) / 2.0;
        let cy = (height as f64 - 1.0) / 2.0;
        [
            [inv[0][0], inv[0][1], cx - inv[0][0] * cx - inv[0][1] * cy],
            [inv[1][0], inv[1][1], cy - inv[1][0] * cx - inv[1][1] * cy],
        ]
    }

    fn is_pure_flip(&self) -> bool {
        self.rotation_deg == 0.0 && self.shear_x == 0.0 && self.shear_y == 0.0
    }
}

/// Apply a fixed parameter draw as one affine warp with bilinear sampling;
/// samples falling outside the source read as zero.
pub fn apply_augment(img: &ImageTensor, params: &AugmentParams) -> ImageTensor {
    let (h, w) = (img.height, img.width);
    if params.is_pure_flip() {
        return ImageTensor::from_fn(h, w, |y, x, c| {
            let sy = if params.flip_y { h - 1 - y } else { y };
            let sx = if params.flip_x { w - 1 - x } else { x };
            img.get(sy, sx, c)
        });
    }
    let a = params.inverse_affine(h, w);
    let mut data = Vec::with_capacity(img.data.len());
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let sx = a[0][0] * xf + a[0][1] * yf + a[0][2];
            let sy = a[1][0] * xf + a[1][1] * yf + a[1][2];
            let px = sample_zero_padded(img, sx, sy);
            data.extend_from_slice(&px);
        }
    }
    ImageTensor { height: h, width: w, data }
}

fn sample_zero_padded(img: &ImageTensor, x: f64, y: f64) -> [f32; 3] {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let at = |yy: i64, xx: i64, c: usize| -> f64 {
        if yy < 0 || xx < 0 || yy >= img.height as i64 || xx >= img.width as i64 {
            0.0
        } else {
            img.get(yy as usize, xx as usize, c) as f64
        }
    };
    let mut out = [0.0f32; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let top = at(y0, x0, c) * (1.0 - fx) + at(y0, x0 + 1, c) * fx;
        let bot = at(y0 + 1, x0, c) * (1.0 - fx) + at(y0 + 1, x0 + 1, c) * fx;
        *o = (top * (1.0 - fy) + bot * fy) as f32;
    }
    out
}

/// Draw parameters from `rng` and warp. Disabled configs return the input
/// unchanged without consuming randomness.
pub fn augment(img: &ImageTensor, cfg: &AugmentConfig, rng: &mut SplitMix64) -> Result<ImageTensor, ImageError> {
    cfg.validate()?;
    if !cfg.enabled {
        return Ok(img.clone());
    }
    let params = AugmentParams::draw(cfg, rng);
    Ok(apply_augment(img, &params))
}
