//! Training-time augmentations for single-channel `[1,H,W]` images.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::CatalogError;
use crate::tensor::Tensor;

/// Rotation angles are drawn uniformly from `[-MAX_ROTATION_DEG, MAX_ROTATION_DEG]`.
pub const MAX_ROTATION_DEG: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentKind {
    Vflip,
    Hflip,
    Rotate,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 3] = [AugmentKind::Vflip, AugmentKind::Hflip, AugmentKind::Rotate];
}

impl FromStr for AugmentKind {
    type Err = CatalogError;

    fn from_str(s: &str) -> Result<Self, CatalogError> {
        match s {
            "vflip" => Ok(Self::Vflip),
            "hflip" => Ok(Self::Hflip),
            "rotate" => Ok(Self::Rotate),
            other => Err(CatalogError::InvalidArgument(format!("unknown augmentation `{other}`"))),
        }
    }
}

fn plane_dims(image: &Tensor) -> Result<(usize, usize), CatalogError> {
    match image.shape() {
        [1, h, w] => Ok((*h, *w)),
        s => Err(CatalogError::InvalidArgument(format!("expected a [1,H,W] image, got {s:?}"))),
    }
}

/// Upside-down flip (reverses the row order).
pub fn vflip(image: &Tensor) -> Result<Tensor, CatalogError> {
    let (h, w) = plane_dims(image)?;
    let d = image.data();
    Ok(Tensor::from_fn([1, h, w], |i| d[(h - 1 - i / w) * w + i % w]))
}

/// Mirror flip (reverses the column order).
pub fn hflip(image: &Tensor) -> Result<Tensor, CatalogError> {
    let (h, w) = plane_dims(image)?;
    let d = image.data();
    Ok(Tensor::from_fn([1, h, w], |i| d[(i / w) * w + (w - 1 - i % w)]))
}

/// Rotation by `degrees` (counter-clockwise in image display coordinates)
/// about the image centre, with bilinear interpolation and zero fill.
pub fn rotate(image: &Tensor, degrees: f64) -> Result<Tensor, CatalogError> {
    let (h, w) = plane_dims(image)?;
    let d = image.data();
    let (s, c) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            d[y as usize * w + x as usize]
        }
    };
    Ok(Tensor::from_fn([1, h, w], |i| {
        let (y, x) = ((i / w) as f64 - cy, (i % w) as f64 - cx);
        // inverse rotation maps the output pixel back into the source
        let sx = c * x - s * y + cx;
        let sy = s * x + c * y + cy;
        let (x0, y0) = (sx.floor(), sy.floor());
        let (fx, fy) = (sx - x0, sy - y0);
        let (x0, y0) = (x0 as isize, y0 as isize);
        let top = at(y0, x0) * (1.0 - fx) + if fx > 0.0 { at(y0, x0 + 1) * fx } else { 0.0 };
        let bottom = if fy > 0.0 {
            (at(y0 + 1, x0) * (1.0 - fx) + if fx > 0.0 { at(y0 + 1, x0 + 1) * fx } else { 0.0 }) * fy
        } else {
            0.0
        };
        top * (1.0 - fy) + bottom
    }))
}

/// One transformed copy per requested kind, in order. The rotation angle is
/// drawn from `seed`.
pub fn augment(image: &Tensor, kinds: &[AugmentKind], seed: u64) -> Result<Vec<Tensor>, CatalogError> {
    if kinds.is_empty() {
        return Err(CatalogError::EmptyKinds);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    kinds
        .iter()
        .map(|k| match k {
            AugmentKind::Vflip => vflip(image),
            AugmentKind::Hflip => hflip(image),
            AugmentKind::Rotate => rotate(image, rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG)),
        })
        .collect()
}
