//! Individual image transforms.
//!
//! Random transforms are split into a `sample_*` step that draws the
//! parameters from an RNG and a deterministic `apply` step, so drawn
//! parameters can be logged and replayed.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropParams {
    /// Bounds on the crop area as a fraction of the image area.
    pub scale: (f64, f64),
    /// Bounds on the crop aspect ratio (width / height).
    pub ratio: (f64, f64),
}

impl Default for CropParams {
    fn default() -> Self {
        Self {
            scale: (0.2, 1.0),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    /// True when every attempt failed and the centre crop was used.
    pub fallback: bool,
}

const CROP_ATTEMPTS: usize = 10;

pub fn sample_crop_window(height: usize, width: usize, params: &CropParams, rng: &mut impl Rng) -> CropWindow {
    let area = (height * width) as f64;
    let (log_lo, log_hi) = (params.ratio.0.ln(), params.ratio.1.ln());
    for _ in 0..CROP_ATTEMPTS {
        let target = area * rng.random_range(params.scale.0..=params.scale.1);
        let aspect = rng.random_range(log_lo..=log_hi).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let top = rng.random_range(0..=height - h);
            let left = rng.random_range(0..=width - w);
            return CropWindow {
                top,
                left,
                height: h,
                width: w,
                fallback: false,
            };
        }
    }
    // Centre crop at the nearest admissible aspect ratio.
    let in_ratio = width as f64 / height as f64;
    let (h, w) = if in_ratio < params.ratio.0 {
        let w = width;
        (((w as f64 / params.ratio.0).round() as usize).min(height), w)
    } else if in_ratio > params.ratio.1 {
        let h = height;
        (h, ((h as f64 * params.ratio.1).round() as usize).min(width))
    } else {
        (height, width)
    };
    CropWindow {
        top: (height - h) / 2,
        left: (width - w) / 2,
        height: h,
        width: w,
        fallback: true,
    }
}

pub fn random_resized_crop(x: &Image, params: &CropParams, out_size: usize, rng: &mut impl Rng) -> (Image, CropWindow) {
    let win = sample_crop_window(x.height(), x.width(), params, rng);
    let out = x.resize_window(win.top, win.left, win.height, win.width, out_size, out_size);
    (out, win)
}

pub fn horizontal_flip(x: &Image) -> Image {
    let mut out = x.clone();
    let (h, w, c) = (x.height(), x.width(), x.channels());
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                out.set(y, xx, ch, x.get(y, w - 1 - xx, ch));
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JitterParams {
    pub p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for JitterParams {
    fn default() -> Self {
        Self {
            p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
        }
    }
}

/// Drawn jitter factors and the order the four adjustments run in
/// (0 brightness, 1 contrast, 2 saturation, 3 hue).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterDraw {
    pub order: [u8; 4],
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

fn factor(rng: &mut impl Rng, strength: f64) -> f64 {
    if strength <= 0.0 {
        return 1.0;
    }
    rng.random_range((1.0 - strength).max(0.0)..=1.0 + strength)
}

pub fn sample_jitter(params: &JitterParams, rng: &mut impl Rng) -> Option<JitterDraw> {
    if !rng.random_bool(params.p.clamp(0.0, 1.0)) {
        return None;
    }
    let mut order = [0u8, 1, 2, 3];
    order.shuffle(rng);
    let brightness = factor(rng, params.brightness);
    let contrast = factor(rng, params.contrast);
    let saturation = factor(rng, params.saturation);
    let hue = if params.hue > 0.0 {
        rng.random_range(-params.hue..=params.hue)
    } else {
        0.0
    };
    Some(JitterDraw {
        order,
        brightness,
        contrast,
        saturation,
        hue,
    })
}

#[inline]
fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn blend_towards(x: &mut Image, factor: f32, target: impl Fn(&[f32]) -> f32) {
    let c = x.channels();
    for px in x.data_mut().chunks_exact_mut(c) {
        let t = target(px);
        for v in px.iter_mut() {
            *v = (factor * *v + (1.0 - factor) * t).clamp(0.0, 1.0);
        }
    }
}

fn pixel_luma(px: &[f32]) -> f32 {
    if px.len() == 3 {
        luma(px[0], px[1], px[2])
    } else {
        px[0]
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

pub fn apply_jitter(x: &Image, draw: &JitterDraw) -> Image {
    let mut out = x.clone();
    let colour = x.channels() == 3;
    for step in draw.order {
        match step {
            0 => {
                let f = draw.brightness as f32;
                out.data_mut().iter_mut().for_each(|v| *v = (*v * f).clamp(0.0, 1.0));
            }
            1 => {
                let c = out.channels();
                let n = (out.height() * out.width()) as f32;
                let mean = out.data().chunks_exact(c).map(pixel_luma).sum::<f32>() / n;
                blend_towards(&mut out, draw.contrast as f32, |_| mean);
            }
            2 if colour => blend_towards(&mut out, draw.saturation as f32, pixel_luma),
            3 if colour && draw.hue != 0.0 => {
                let shift = draw.hue as f32;
                for px in out.data_mut().chunks_exact_mut(3) {
                    let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
                    let (r, g, b) = hsv_to_rgb(h + shift, s, v);
                    px[0] = r.clamp(0.0, 1.0);
                    px[1] = g.clamp(0.0, 1.0);
                    px[2] = b.clamp(0.0, 1.0);
                }
            }
            _ => {}
        }
    }
    out
}

pub fn color_jitter(x: &Image, params: &JitterParams, rng: &mut impl Rng) -> Image {
    match sample_jitter(params, rng) {
        Some(draw) => apply_jitter(x, &draw),
        None => x.clone(),
    }
}

/// Luma conversion; the channel count is preserved, so RGB input comes back
/// as three equal channels.
pub fn grayscale(x: &Image) -> Image {
    let mut out = x.clone();
    if x.channels() == 3 {
        for px in out.data_mut().chunks_exact_mut(3) {
            let l = luma(px[0], px[1], px[2]).clamp(0.0, 1.0);
            px.fill(l);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlurParams {
    pub p: f64,
    pub sigma: (f64, f64),
}

impl Default for BlurParams {
    fn default() -> Self {
        Self {
            p: 0.5,
            sigma: (0.1, 2.0),
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k.into_iter().map(|v| v as f32).collect()
}

/// Separable Gaussian smoothing of one `h × w` plane, edge-clamped.
pub(crate) fn smooth_plane(plane: &[f32], h: usize, w: usize, sigma: f64) -> Vec<f32> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (i, kv) in k.iter().enumerate() {
                let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kv * plane[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (i, kv) in k.iter().enumerate() {
                let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

pub fn gaussian_blur(x: &Image, sigma: f64) -> Image {
    let (h, w, c) = (x.height(), x.width(), x.channels());
    let mut out = x.clone();
    for ch in 0..c {
        let plane: Vec<f32> = x.data().iter().skip(ch).step_by(c).copied().collect();
        let smoothed = smooth_plane(&plane, h, w, sigma);
        for (i, v) in smoothed.into_iter().enumerate() {
            out.data_mut()[i * c + ch] = v.clamp(0.0, 1.0);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RotationParams {
    pub p: f64,
    /// Angles are drawn uniformly from `[-max_degrees, max_degrees]`.
    pub max_degrees: f64,
}

impl Default for RotationParams {
    fn default() -> Self {
        Self {
            p: 1.0,
            max_degrees: 90.0,
        }
    }
}

pub fn sample_rotation(params: &RotationParams, rng: &mut impl Rng) -> Option<f64> {
    if !rng.random_bool(params.p.clamp(0.0, 1.0)) {
        return None;
    }
    Some(rng.random_range(-params.max_degrees..=params.max_degrees))
}

/// Counter-clockwise rotation about the image centre; bilinear, zero fill.
pub fn rotate(x: &Image, degrees: f64) -> Image {
    if degrees == 0.0 {
        return x.clone();
    }
    let (h, w, c) = (x.height(), x.width(), x.channels());
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = Image::zeros(h, w, c);
    let mut px = vec![0.0f32; c];
    for y in 0..h {
        for xx in 0..w {
            // Output offset in a y-up frame, rotated back onto the source.
            let u = xx as f64 - cx;
            let v = cy - y as f64;
            let su = u * cos + v * sin;
            let sv = -u * sin + v * cos;
            x.sample_zero(cy - sv, cx + su, &mut px);
            for (ch, val) in px.iter().enumerate() {
                out.set(y, xx, ch, val.clamp(0.0, 1.0));
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElasticParams {
    pub p: f64,
    pub alpha: f64,
    pub sigma: f64,
}

impl Default for ElasticParams {
    fn default() -> Self {
        Self {
            p: 1.0,
            alpha: 100.0,
            sigma: 5.0,
        }
    }
}

/// Per-pixel displacement in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    pub height: usize,
    pub width: usize,
    pub dx: Vec<f32>,
    pub dy: Vec<f32>,
}

impl DisplacementField {
    pub fn max_magnitude(&self) -> f64 {
        self.dx
            .iter()
            .zip(&self.dy)
            .map(|(&x, &y)| ((x as f64).powi(2) + (y as f64).powi(2)).sqrt())
            .fold(0.0, f64::max)
    }
}

/// Uniform `(-1, 1)` noise per axis, Gaussian-smoothed.  If any smoothed
/// vector is longer than 1 the whole field is rescaled to unit maximum
/// magnitude; the result is then scaled by `alpha`, so no displacement
/// exceeds `alpha` pixels.
pub fn elastic_displacement_field(h: usize, w: usize, alpha: f64, sigma: f64, rng: &mut impl Rng) -> DisplacementField {
    let mut noise = || -> Vec<f32> { (0..h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect() };
    let raw_x = noise();
    let raw_y = noise();
    let sx = smooth_plane(&raw_x, h, w, sigma);
    let sy = smooth_plane(&raw_y, h, w, sigma);
    let max = sx
        .iter()
        .zip(&sy)
        .map(|(&a, &b)| ((a as f64).powi(2) + (b as f64).powi(2)).sqrt())
        .fold(0.0, f64::max);
    // One f32 ulp of headroom keeps the rounded components within alpha.
    let scale = alpha / max.max(1.0) * (1.0 - f32::EPSILON as f64);
    DisplacementField {
        height: h,
        width: w,
        dx: sx.iter().map(|&v| (v as f64 * scale) as f32).collect(),
        dy: sy.iter().map(|&v| (v as f64 * scale) as f32).collect(),
    }
}

/// Resamples `x` at `(y + dy, x + dx)` per pixel; bilinear, zero fill.
pub fn warp(x: &Image, field: &DisplacementField) -> Image {
    let (h, w, c) = (x.height(), x.width(), x.channels());
    let mut out = Image::zeros(h, w, c);
    let mut px = vec![0.0f32; c];
    for y in 0..h {
        for xx in 0..w {
            let i = y * w + xx;
            x.sample_zero(y as f64 + field.dy[i] as f64, xx as f64 + field.dx[i] as f64, &mut px);
            for (ch, val) in px.iter().enumerate() {
                out.set(y, xx, ch, val.clamp(0.0, 1.0));
            }
        }
    }
    out
}

pub fn elastic_transform(x: &Image, alpha: f64, sigma: f64, rng: &mut impl Rng) -> (Image, DisplacementField) {
    let field = elastic_displacement_field(x.height(), x.width(), alpha, sigma, rng);
    if alpha == 0.0 {
        return (x.clone(), field);
    }
    (warp(x, &field), field)
}
