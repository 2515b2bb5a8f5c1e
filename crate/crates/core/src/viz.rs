//! Mask overlay rendering: predicted boundary in green, ground truth in
//! blue, drawn over the (unit-range) image.

use std::path::Path;

use crate::dataio::{save_image, NormalizationMode};
use crate::error::{Error, Result};
use crate::tensor::{shape_str, Tensor4};

const GREEN: [f64; 3] = [0.0, 1.0, 0.0];
const BLUE: [f64; 3] = [0.0, 0.0, 1.0];

/// A mask pixel is boundary when it is set and any 4-neighbor is unset
/// (image edges count as unset neighbors being absent, not unset).
fn is_boundary(mask: &Tensor4, n: usize, y: usize, x: usize) -> bool {
    if mask[(n, y, x, 0)] != 1.0 {
        return false;
    }
    let (_, h, w, _) = mask.dim();
    let neighbors = [
        (y.wrapping_sub(1), x),
        (y + 1, x),
        (y, x.wrapping_sub(1)),
        (y, x + 1),
    ];
    neighbors
        .iter()
        .any(|&(ny, nx)| ny < h && nx < w && mask[(n, ny, nx, 0)] == 0.0)
}

/// Render ground truth (blue) and prediction (green) boundaries over an
/// image in [0, 1]. Where the boundaries coincide, green wins.
pub fn overlay(image: &Tensor4, gt_mask: &Tensor4, pred_mask: &Tensor4) -> Result<Tensor4> {
    let (n, h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::shape("3 channels", shape_str(image)));
    }
    for mask in [gt_mask, pred_mask] {
        if mask.dim() != (n, h, w, 1) {
            return Err(Error::shape(
                format!("mask ({n}, {h}, {w}, 1)"),
                shape_str(mask),
            ));
        }
    }
    let mut out = image.clone();
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let color = if is_boundary(pred_mask, ni, y, x) {
                    Some(GREEN)
                } else if is_boundary(gt_mask, ni, y, x) {
                    Some(BLUE)
                } else {
                    None
                };
                if let Some(color) = color {
                    for ch in 0..3 {
                        out[(ni, y, x, ch)] = color[ch];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Render and write sample 0 of the overlay as a PNG.
pub fn save_overlay(
    path: &Path,
    image: &Tensor4,
    gt_mask: &Tensor4,
    pred_mask: &Tensor4,
) -> Result<()> {
    let rendered = overlay(image, gt_mask, pred_mask)?;
    save_image(path, &rendered, 0, NormalizationMode::UnitInterval)
}
