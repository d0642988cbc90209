//! 8-bit RGB overlays of attribution maps on gray images.

use std::path::Path;

use image::{ImageFormat, RgbImage};

use super::{AttributionError, Result};
use crate::tensor::Tensor;

/// 99th percentile (nearest rank) of `|values|`; 1 when that is zero.
pub fn clip_level(map: &Tensor) -> f64 {
    let mut mags: Vec<f64> = map.data().iter().map(|v| v.abs()).collect();
    mags.sort_by(f64::total_cmp);
    let rank = ((0.99 * mags.len() as f64).ceil() as usize).clamp(1, mags.len());
    let c = mags[rank - 1];
    if c > 0.0 {
        c
    } else {
        1.0
    }
}

fn gray_byte(v: f64) -> f64 {
    (((v + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round()
}

/// Blends red (positive) or blue (negative) over the gray image with opacity
/// `|t|`, where `t = clamp(value / clip_level, -1, 1)`.
pub fn render_overlay(image: &Tensor, map: &Tensor) -> Result<RgbImage> {
    let (h, w) = match map.shape() {
        [h, w] => (*h, *w),
        s => return Err(AttributionError::ShapeMismatch(format!("map {s:?}, expected [H,W]"))),
    };
    if image.numel() != h * w {
        return Err(AttributionError::ShapeMismatch(format!("image {:?} vs map {:?}", image.shape(), map.shape())));
    }
    let c = clip_level(map);
    let mut buf = Vec::with_capacity(3 * h * w);
    for (&x, &v) in image.data().iter().zip(map.data()) {
        let g = gray_byte(x);
        let t = (v / c).clamp(-1.0, 1.0);
        let a = t.abs();
        let pure = if t >= 0.0 { [255.0, 0.0, 0.0] } else { [0.0, 0.0, 255.0] };
        for p in pure {
            buf.push(((1.0 - a) * g + a * p).round() as u8);
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized to image"))
}

pub fn write_overlay_png(path: impl AsRef<Path>, image: &Tensor, map: &Tensor) -> Result<()> {
    render_overlay(image, map)?.save_with_format(path, ImageFormat::Png)?;
    Ok(())
}
