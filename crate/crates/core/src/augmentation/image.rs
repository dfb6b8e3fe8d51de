use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_SIDE: usize = 8;

/// Height × width × channels image with values in `[0, 1]`, stored
/// row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::InvalidInput(format!(
                "image must be at least {MIN_SIDE}x{MIN_SIDE}, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidInput(format!("image must have 1 or 3 channels, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(height * width * channels, data.len()));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Raw little-endian bytes of the pixel buffer, for byte-exact
    /// comparisons and digests.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// Unvalidated construction for internal buffers such as small heatmaps.
    pub(crate) fn from_raw(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    /// Bilinear sample at a continuous pixel-centre coordinate; taps outside
    /// the image read as zero.
    pub fn sample_zero(&self, y: f64, x: f64, out: &mut [f32]) {
        let y0 = y.floor();
        let x0 = x.floor();
        let fy = (y - y0) as f32;
        let fx = (x - x0) as f32;
        let (y0, x0) = (y0 as isize, x0 as isize);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                let w = wy * wx;
                let (yy, xx) = (y0 + dy, x0 + dx);
                if w == 0.0 || yy < 0 || xx < 0 || yy >= self.height as isize || xx >= self.width as isize {
                    continue;
                }
                let base = (yy as usize * self.width + xx as usize) * self.channels;
                for (c, o) in out.iter_mut().enumerate() {
                    *o += w * self.data[base + c];
                }
            }
        }
    }

    /// Bilinear sample with coordinates clamped to the image.
    fn sample_clamped(&self, y: f64, x: f64, out: &mut [f32]) {
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let fy = (y - y0 as f64) as f32;
        let fx = (x - x0 as f64) as f32;
        for (c, o) in out.iter_mut().enumerate() {
            let top = self.get(y0, x0, c) * (1.0 - fx) + self.get(y0, x1, c) * fx;
            let bottom = self.get(y1, x0, c) * (1.0 - fx) + self.get(y1, x1, c) * fx;
            *o = top * (1.0 - fy) + bottom * fy;
        }
    }

    /// Bilinear resize of the window `(top, left, h, w)` to `out_h × out_w`,
    /// half-pixel aligned, edge-clamped.
    pub fn resize_window(&self, top: usize, left: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Image {
        let mut out = Image::zeros(out_h, out_w, self.channels);
        let sy = h as f64 / out_h as f64;
        let sx = w as f64 / out_w as f64;
        let mut px = vec![0.0f32; self.channels];
        for oy in 0..out_h {
            let y = top as f64 + (oy as f64 + 0.5) * sy - 0.5;
            let y = y.clamp(top as f64, (top + h - 1) as f64);
            for ox in 0..out_w {
                let x = left as f64 + (ox as f64 + 0.5) * sx - 0.5;
                let x = x.clamp(left as f64, (left + w - 1) as f64);
                self.sample_clamped(y, x, &mut px);
                let base = (oy * out_w + ox) * self.channels;
                out.data[base..base + self.channels].copy_from_slice(&px);
            }
        }
        out
    }

    pub fn resize(&self, out_h: usize, out_w: usize) -> Image {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        self.resize_window(0, 0, self.height, self.width, out_h, out_w)
    }

    /// Replicates a single-channel image to three channels.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image {
            height: self.height,
            width: self.width,
            channels: 3,
            data,
        }
    }
}
