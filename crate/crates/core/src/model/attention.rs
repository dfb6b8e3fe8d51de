//! Part-restricted attention maps.
//!
//! For each position of the last convolutional feature map `F` (`C × HW`)
//! the grouped last layer gives `M = W · F`, whose rows split into the DIR
//! and DVR blocks.  The energy of a part at a position is the squared L2
//! norm of its rows of `M`, so DIR and DVR energies add up to the full
//! energy.  The heatmap is the square root of the energy, min-max scaled to
//! `[0, 1]` and bilinearly upsampled to the input size.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::Network;
use crate::augmentation::Image;
use crate::error::{Error, Result};
use crate::representation::Part;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    /// Row-major values in `[0, 1]`.
    pub values: Vec<f32>,
}

impl Heatmap {
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// Writes an 8-bit grayscale PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.values.iter().map(|v| (v * 255.0).round() as u8).collect();
        image::save_buffer(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
        )?;
        Ok(())
    }
}

/// Per-position energy of `part` over the last convolutional map,
/// `H' × W'`, in evaluation mode.
pub fn attention_energy(net: &Network, x: &Image, part: Part) -> Result<Array2<f64>> {
    if !net.encoder.is_convolutional() {
        return Err(Error::Unsupported(format!(
            "attention maps need a convolutional encoder, got {:?}",
            net.config.encoder.arch
        )));
    }
    let input = net.encoder.input_map(&[x])?;
    let f = net.encoder.conv_features(&input)?;
    let w = net.encoder.last.weight.as_matrix();
    let rows = part.columns(net.dim(), net.dir_dim());
    let mut energy = Array2::<f64>::zeros((f.height, f.width));
    for (s, e) in energy.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for r in rows.clone() {
            let m: f64 = (0..f.channels).map(|c| w[[r, c]] as f64 * f.data[[c, s]] as f64).sum();
            acc += m * m;
        }
        *e = acc;
    }
    Ok(energy)
}

/// Min-max scaling to `[0, 1]`; a constant map becomes all zeros.
fn normalize(values: &[f64]) -> Vec<f32> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) || !span.is_finite() {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (((v - lo) / span) as f32).clamp(0.0, 1.0)).collect()
}

/// Heatmap for `part` at the input resolution.
pub fn attention_map(net: &Network, x: &Image, part: Part) -> Result<Heatmap> {
    let energy = attention_energy(net, x, part)?;
    let (h, w) = energy.dim();
    let mags: Vec<f64> = energy.iter().map(|e| e.sqrt()).collect();
    let small = Image::from_raw(h, w, 1, normalize(&mags));
    let size = net.config.encoder.input_size;
    let up = small.resize(size, size);
    Ok(Heatmap {
        height: size,
        width: size,
        values: up.data().iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    })
}
