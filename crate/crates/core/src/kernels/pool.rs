//! 2×2 max pooling with stride 2.

use ndarray::Array4;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Returns the pooled map and the flat `(ih*W + iw)` index of each winner,
/// used by the backward scatter. Requires even spatial extents.
pub fn maxpool2_forward(x: &Tensor4) -> Result<(Tensor4, Array4<usize>)> {
    let (n, h, w, c) = x.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "even spatial dims for 2x2 max pool",
            format!("({h}, {w})"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array4::<f64>::zeros((n, oh, ow, c));
    let mut arg = Array4::<usize>::zeros((n, oh, ow, c));
    for ni in 0..n {
        for or in 0..oh {
            for oc in 0..ow {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dr in 0..2 {
                        for dc in 0..2 {
                            let (ih, iw) = (or * 2 + dr, oc * 2 + dc);
                            let v = x[(ni, ih, iw, ch)];
                            if v > best {
                                best = v;
                                best_idx = ih * w + iw;
                            }
                        }
                    }
                    y[(ni, or, oc, ch)] = best;
                    arg[(ni, or, oc, ch)] = best_idx;
                }
            }
        }
    }
    Ok((y, arg))
}

pub fn maxpool2_backward(
    dy: &Tensor4,
    arg: &Array4<usize>,
    input_h: usize,
    input_w: usize,
) -> Tensor4 {
    let (n, oh, ow, c) = dy.dim();
    let mut dx = Array4::<f64>::zeros((n, input_h, input_w, c));
    for ni in 0..n {
        for or in 0..oh {
            for oc in 0..ow {
                for ch in 0..c {
                    let idx = arg[(ni, or, oc, ch)];
                    dx[(ni, idx / input_w, idx % input_w, ch)] += dy[(ni, or, oc, ch)];
                }
            }
        }
    }
    dx
}
