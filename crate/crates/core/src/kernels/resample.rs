//! Bilinear resampling (half-pixel centers): ×2 upsampling with its
//! transpose for the tape, plus arbitrary-size resizing for tensors.

use ndarray::{Array4, Axis};

use crate::parallel::parallel_enabled;
use crate::tensor::Tensor4;

#[cfg(feature = "parallel")]
use ndarray::parallel::prelude::*;

/// (low index, high index, weight on high) per output position.
fn scaled_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let src = (i as f64 + 0.5) * scale - 0.5;
            let src = src.max(0.0).min(in_len as f64 - 1.0);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

fn taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    debug_assert_eq!(out_len, in_len * 2);
    scaled_taps(out_len, in_len)
}

/// Bilinear resize of a tensor to an arbitrary spatial size.
pub fn resize_bilinear(x: &Tensor4, out_h: usize, out_w: usize) -> Tensor4 {
    let (n, h, w, c) = x.dim();
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let row_taps = scaled_taps(out_h, h);
    let col_taps = scaled_taps(out_w, w);
    Array4::from_shape_fn((n, out_h, out_w, c), |(ni, orow, ocol, ch)| {
        let (r0, r1, fr) = row_taps[orow];
        let (c0, c1, fc) = col_taps[ocol];
        (1.0 - fr) * ((1.0 - fc) * x[(ni, r0, c0, ch)] + fc * x[(ni, r0, c1, ch)])
            + fr * ((1.0 - fc) * x[(ni, r1, c0, ch)] + fc * x[(ni, r1, c1, ch)])
    })
}

/// Nearest-neighbor resize; keeps binary masks binary.
pub fn resize_nearest(x: &Tensor4, out_h: usize, out_w: usize) -> Tensor4 {
    let (n, h, w, c) = x.dim();
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let sh = h as f64 / out_h as f64;
    let sw = w as f64 / out_w as f64;
    Array4::from_shape_fn((n, out_h, out_w, c), |(ni, orow, ocol, ch)| {
        let r = (((orow as f64 + 0.5) * sh - 0.5).round().max(0.0) as usize).min(h - 1);
        let col = (((ocol as f64 + 0.5) * sw - 0.5).round().max(0.0) as usize).min(w - 1);
        x[(ni, r, col, ch)]
    })
}

pub fn upsample2_forward(x: &Tensor4) -> Tensor4 {
    let (n, h, w, c) = x.dim();
    let (oh, ow) = (h * 2, w * 2);
    let row_taps = taps(oh, h);
    let col_taps = taps(ow, w);
    let xs = x.as_slice().expect("x layout");
    let mut y = Array4::<f64>::zeros((n, oh, ow, c));

    let fill = |ni: usize, yn: &mut [f64]| {
        for (orow, &(r0, r1, fr)) in row_taps.iter().enumerate() {
            for (ocol, &(c0, c1, fc)) in col_taps.iter().enumerate() {
                let ybase = (orow * ow + ocol) * c;
                let b00 = ((ni * h + r0) * w + c0) * c;
                let b01 = ((ni * h + r0) * w + c1) * c;
                let b10 = ((ni * h + r1) * w + c0) * c;
                let b11 = ((ni * h + r1) * w + c1) * c;
                let (w00, w01) = ((1.0 - fr) * (1.0 - fc), (1.0 - fr) * fc);
                let (w10, w11) = (fr * (1.0 - fc), fr * fc);
                for ch in 0..c {
                    yn[ybase + ch] = w00 * xs[b00 + ch]
                        + w01 * xs[b01 + ch]
                        + w10 * xs[b10 + ch]
                        + w11 * xs[b11 + ch];
                }
            }
        }
    };

    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        y.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(ni, mut yn)| fill(ni, yn.as_slice_mut().expect("y layout")));
        return y;
    }

    for (ni, mut yn) in y.axis_iter_mut(Axis(0)).enumerate() {
        fill(ni, yn.as_slice_mut().expect("y layout"));
    }
    y
}

pub fn upsample2_backward(dy: &Tensor4, input_h: usize, input_w: usize) -> Tensor4 {
    let (n, oh, ow, c) = dy.dim();
    let row_taps = taps(oh, input_h);
    let col_taps = taps(ow, input_w);
    let dys = dy.as_slice().expect("dy layout");
    let mut dx = Array4::<f64>::zeros((n, input_h, input_w, c));

    let scatter = |ni: usize, dxn: &mut [f64]| {
        for (orow, &(r0, r1, fr)) in row_taps.iter().enumerate() {
            for (ocol, &(c0, c1, fc)) in col_taps.iter().enumerate() {
                let dybase = ((ni * oh + orow) * ow + ocol) * c;
                let b00 = (r0 * input_w + c0) * c;
                let b01 = (r0 * input_w + c1) * c;
                let b10 = (r1 * input_w + c0) * c;
                let b11 = (r1 * input_w + c1) * c;
                let (w00, w01) = ((1.0 - fr) * (1.0 - fc), (1.0 - fr) * fc);
                let (w10, w11) = (fr * (1.0 - fc), fr * fc);
                for ch in 0..c {
                    let g = dys[dybase + ch];
                    dxn[b00 + ch] += w00 * g;
                    dxn[b01 + ch] += w01 * g;
                    dxn[b10 + ch] += w10 * g;
                    dxn[b11 + ch] += w11 * g;
                }
            }
        }
    };

    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        dx.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(ni, mut dxn)| scatter(ni, dxn.as_slice_mut().expect("dx layout")));
        return dx;
    }

    for (ni, mut dxn) in dx.axis_iter_mut(Axis(0)).enumerate() {
        scatter(ni, dxn.as_slice_mut().expect("dx layout"));
    }
    dx
}
