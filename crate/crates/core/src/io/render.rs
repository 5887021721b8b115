//! Grayscale PNG rendering of heatmaps, one image per scale with one pixel
//! per grid cell.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use crate::assign::LabelTensorSet;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("png encoding: {0}")]
    Encoding(#[from] png::EncodingError),
    #[error("scale {scale} out of range ({count} scales)")]
    NoSuchScale { scale: usize, count: usize },
    #[error("heatmap has zero width or height")]
    Empty,
}

/// Maps `[0, 1]` to `0..=255`, rounding to nearest.
pub fn intensity(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit grayscale PNG of a heatmap indexed `[y, x]`.
pub fn heatmap_png_bytes(heat: &Array2<f64>) -> Result<Vec<u8>, RenderError> {
    let (h, w) = heat.dim();
    if h == 0 || w == 0 {
        return Err(RenderError::Empty);
    }
    let pixels: Vec<u8> = heat.iter().map(|&v| intensity(v)).collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&pixels)?;
    }
    Ok(out)
}

pub fn render_heatmap_png(labels: &LabelTensorSet, scale: usize, path: &Path) -> Result<(), RenderError> {
    let s = labels.scales.get(scale).ok_or(RenderError::NoSuchScale {
        scale,
        count: labels.scales.len(),
    })?;
    let bytes = heatmap_png_bytes(&s.heat)?;
    Ok(fs::write(path, bytes)?)
}
