//! Standard and depthwise 2-D convolution, NHWC, zero "same" padding.
//!
//! The standard convolution lowers to im2col + GEMM; the GEMM itself is
//! single-threaded and deterministic, the im2col/col2im scatter runs
//! per-sample in parallel.

use ndarray::{Array2, Array4, Axis};

use crate::parallel::parallel_enabled;
use crate::tensor::Tensor4;

#[cfg(feature = "parallel")]
use ndarray::parallel::prelude::*;

/// Output spatial extent for kernel `k`, padding `k/2`, given stride.
pub fn conv_out_dim(input: usize, k: usize, stride: usize) -> usize {
    let pad = k / 2;
    (input + 2 * pad - k) / stride + 1
}

/// `dot` may return non-row-major results for thin matrices; reshapes and
/// slicing below assume row-major, so normalize first.
pub(crate) fn standardize2(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn im2col_block(
    xs: &[f64],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    block: &mut [f64],
) {
    let pad = (k / 2) as isize;
    let mut bi = 0;
    for out_r in 0..oh {
        for out_c in 0..ow {
            for kh in 0..k {
                let ih = (out_r * stride + kh) as isize - pad;
                for kw in 0..k {
                    let iw = (out_c * stride + kw) as isize - pad;
                    let dst = &mut block[bi..bi + c];
                    bi += c;
                    if ih >= 0 && (ih as usize) < h && iw >= 0 && (iw as usize) < w {
                        let base = ((n * h + ih as usize) * w + iw as usize) * c;
                        dst.copy_from_slice(&xs[base..base + c]);
                    } else {
                        dst.fill(0.0);
                    }
                }
            }
        }
    }
}

fn col2im_block(
    dxs: &mut [f64],
    dcol: &[f64],
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) {
    let pad = (k / 2) as isize;
    let mut bi = 0;
    for out_r in 0..oh {
        for out_c in 0..ow {
            for kh in 0..k {
                let ih = (out_r * stride + kh) as isize - pad;
                for kw in 0..k {
                    let iw = (out_c * stride + kw) as isize - pad;
                    let src = &dcol[bi..bi + c];
                    bi += c;
                    if ih >= 0 && (ih as usize) < h && iw >= 0 && (iw as usize) < w {
                        let base = (ih as usize * w + iw as usize) * c;
                        for ch in 0..c {
                            dxs[base + ch] += src[ch];
                        }
                    }
                }
            }
        }
    }
}

fn im2col(x: &Tensor4, k: usize, stride: usize) -> Array2<f64> {
    let (n, h, w, c) = x.dim();
    let oh = conv_out_dim(h, k, stride);
    let ow = conv_out_dim(w, k, stride);
    let xs = x.as_slice().expect("standard layout");
    let mut col = Array2::<f64>::zeros((n * oh * ow, k * k * c));

    let fill = |ni: usize, block: &mut [f64]| {
        im2col_block(xs, ni, h, w, c, k, stride, oh, ow, block);
    };

    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        col.axis_chunks_iter_mut(Axis(0), oh * ow)
            .into_par_iter()
            .enumerate()
            .for_each(|(ni, mut chunk)| fill(ni, chunk.as_slice_mut().expect("chunk layout")));
        return col;
    }

    for (ni, mut chunk) in col.axis_chunks_iter_mut(Axis(0), oh * ow).enumerate() {
        fill(ni, chunk.as_slice_mut().expect("chunk layout"));
    }
    col
}

/// y = conv(x, w), weights `(k, k, c_in, c_out)`, bias-free.
pub fn conv2d_forward(x: &Tensor4, w: &Tensor4, stride: usize) -> Tensor4 {
    let (n, h, wd, cin) = x.dim();
    let (k, _, wcin, cout) = w.dim();
    assert_eq!(cin, wcin, "conv channel mismatch");
    let oh = conv_out_dim(h, k, stride);
    let ow = conv_out_dim(wd, k, stride);

    let col = im2col(x, k, stride);
    let w2 = w.view().into_shape((k * k * cin, cout)).expect("w layout");
    let y2 = standardize2(col.dot(&w2));
    y2.into_shape((n, oh, ow, cout)).expect("y shape")
}

/// Gradients of conv w.r.t. input and weights given upstream `dy`.
pub fn conv2d_backward(x: &Tensor4, w: &Tensor4, stride: usize, dy: &Tensor4) -> (Tensor4, Tensor4) {
    let (n, h, wd, cin) = x.dim();
    let (k, _, _, cout) = w.dim();
    let oh = conv_out_dim(h, k, stride);
    let ow = conv_out_dim(wd, k, stride);

    let col = im2col(x, k, stride);
    let dy2 = dy
        .view()
        .into_shape((n * oh * ow, cout))
        .expect("dy layout");
    let w2 = w.view().into_shape((k * k * cin, cout)).expect("w layout");

    let dw2 = standardize2(col.t().dot(&dy2));
    let dw = dw2.into_shape((k, k, cin, cout)).expect("dw shape");

    let dcol = standardize2(dy2.dot(&w2.t()));
    let mut dx = Array4::<f64>::zeros((n, h, wd, cin));
    let dcol_s = dcol.as_slice().expect("dcol layout");
    let rows_per_n = oh * ow * k * k * cin;

    let scatter = |ni: usize, dxn: &mut [f64]| {
        col2im_block(
            dxn,
            &dcol_s[ni * rows_per_n..(ni + 1) * rows_per_n],
            h,
            wd,
            cin,
            k,
            stride,
            oh,
            ow,
        );
    };

    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        dx.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(ni, mut dxn)| scatter(ni, dxn.as_slice_mut().expect("dx layout")));
        return (dx, dw);
    }

    for (ni, mut dxn) in dx.axis_iter_mut(Axis(0)).enumerate() {
        scatter(ni, dxn.as_slice_mut().expect("dx layout"));
    }
    (dx, dw)
}

fn depthwise_forward_block(
    xs: &[f64],
    ws: &[f64],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    yn: &mut [f64],
) {
    let pad = (k / 2) as isize;
    for out_r in 0..oh {
        for out_c in 0..ow {
            let ybase = (out_r * ow + out_c) * c;
            for kh in 0..k {
                let ih = (out_r * stride + kh) as isize - pad;
                if ih < 0 || ih as usize >= h {
                    continue;
                }
                for kw in 0..k {
                    let iw = (out_c * stride + kw) as isize - pad;
                    if iw < 0 || iw as usize >= w {
                        continue;
                    }
                    let xbase = ((n * h + ih as usize) * w + iw as usize) * c;
                    let wbase = (kh * k + kw) * c;
                    for ch in 0..c {
                        yn[ybase + ch] += xs[xbase + ch] * ws[wbase + ch];
                    }
                }
            }
        }
    }
}

/// Depthwise convolution, weights `(k, k, c, 1)`: one k×k filter per channel.
pub fn depthwise_forward(x: &Tensor4, w: &Tensor4, stride: usize) -> Tensor4 {
    let (n, h, wd, c) = x.dim();
    let (k, _, wc, one) = w.dim();
    assert_eq!((wc, one), (c, 1), "depthwise channel mismatch");
    let oh = conv_out_dim(h, k, stride);
    let ow = conv_out_dim(wd, k, stride);

    let xs = x.as_slice().expect("x layout");
    let ws = w.as_slice().expect("w layout");
    let mut y = Array4::<f64>::zeros((n, oh, ow, c));

    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        y.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(ni, mut yn)| {
                depthwise_forward_block(
                    xs,
                    ws,
                    ni,
                    h,
                    wd,
                    c,
                    k,
                    stride,
                    oh,
                    ow,
                    yn.as_slice_mut().expect("y layout"),
                )
            });
        return y;
    }

    for (ni, mut yn) in y.axis_iter_mut(Axis(0)).enumerate() {
        depthwise_forward_block(
            xs,
            ws,
            ni,
            h,
            wd,
            c,
            k,
            stride,
            oh,
            ow,
            yn.as_slice_mut().expect("y layout"),
        );
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn depthwise_backward_block(
    xs: &[f64],
    ws: &[f64],
    dys: &[f64],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    dxn: &mut [f64],
    dwn: &mut [f64],
) {
    let pad = (k / 2) as isize;
    for out_r in 0..oh {
        for out_c in 0..ow {
            let dybase = ((n * oh + out_r) * ow + out_c) * c;
            for kh in 0..k {
                let ih = (out_r * stride + kh) as isize - pad;
                if ih < 0 || ih as usize >= h {
                    continue;
                }
                for kw in 0..k {
                    let iw = (out_c * stride + kw) as isize - pad;
                    if iw < 0 || iw as usize >= w {
                        continue;
                    }
                    let xbase = ((n * h + ih as usize) * w + iw as usize) * c;
                    let dxbase = (ih as usize * w + iw as usize) * c;
                    let wbase = (kh * k + kw) * c;
                    for ch in 0..c {
                        let g = dys[dybase + ch];
                        dxn[dxbase + ch] += g * ws[wbase + ch];
                        dwn[wbase + ch] += g * xs[xbase + ch];
                    }
                }
            }
        }
    }
}

/// Gradients of depthwise conv. Per-sample weight gradients are reduced
/// in batch order so the result does not depend on thread scheduling.
pub fn depthwise_backward(
    x: &Tensor4,
    w: &Tensor4,
    stride: usize,
    dy: &Tensor4,
) -> (Tensor4, Tensor4) {
    let (n, h, wd, c) = x.dim();
    let (k, _, _, _) = w.dim();
    let oh = conv_out_dim(h, k, stride);
    let ow = conv_out_dim(wd, k, stride);

    let xs = x.as_slice().expect("x layout");
    let ws = w.as_slice().expect("w layout");
    let dys = dy.as_slice().expect("dy layout");
    let mut dx = Array4::<f64>::zeros((n, h, wd, c));

    let run = |ni: usize, dxn: &mut [f64]| -> Vec<f64> {
        let mut dwn = vec![0.0; k * k * c];
        depthwise_backward_block(
            xs, ws, dys, ni, h, wd, c, k, stride, oh, ow, dxn, &mut dwn,
        );
        dwn
    };

    #[cfg(feature = "parallel")]
    let partials: Vec<Vec<f64>> = if parallel_enabled() {
        dx.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .map(|(ni, mut dxn)| run(ni, dxn.as_slice_mut().expect("dx layout")))
            .collect()
    } else {
        dx.axis_iter_mut(Axis(0))
            .enumerate()
            .map(|(ni, mut dxn)| run(ni, dxn.as_slice_mut().expect("dx layout")))
            .collect()
    };

    #[cfg(not(feature = "parallel"))]
    let partials: Vec<Vec<f64>> = dx
        .axis_iter_mut(Axis(0))
        .enumerate()
        .map(|(ni, mut dxn)| run(ni, dxn.as_slice_mut().expect("dx layout")))
        .collect();

    let mut dw = vec![0.0; k * k * c];
    for part in &partials {
        for (acc, v) in dw.iter_mut().zip(part) {
            *acc += v;
        }
    }
    let dw = Array4::from_shape_vec((k, k, c, 1), dw).expect("dw shape");
    (dx, dw)
}
