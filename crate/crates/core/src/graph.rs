//! Reverse-mode autodiff over rank-4 tensors.
//!
//! A [`Tape`] records every operation of one forward pass as a node in a
//! flat vector; [`Tape::backward`] walks the vector in reverse, pushing
//! gradients to parents. Parameters enter the tape as `Param` leaves
//! tagged with their index in the owning model's parameter store, so the
//! caller can collect weight gradients after the walk.

use std::collections::BTreeMap;

use ndarray::Array4;

use crate::kernels;
use crate::tensor::Tensor4;

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafKind {
    Input,
    Param(usize),
}

enum Op {
    Leaf(LeafKind),
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
    },
    Depthwise {
        x: NodeId,
        w: NodeId,
        stride: usize,
    },
    AddBias {
        x: NodeId,
        b: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor4,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Silu {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    ScaleChannels {
        x: NodeId,
        s: NodeId,
    },
    MaxPool2 {
        x: NodeId,
        arg: Array4<usize>,
        in_h: usize,
        in_w: usize,
    },
    Upsample2 {
        x: NodeId,
        in_h: usize,
        in_w: usize,
    },
    ConcatC {
        a: NodeId,
        b: NodeId,
        split: usize,
    },
    GlobalAvgPool {
        x: NodeId,
        in_h: usize,
        in_w: usize,
    },
    Dense {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
}

struct Node {
    value: Tensor4,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor4>>,
}

impl Gradients {
    pub fn grad(&self, id: NodeId) -> Option<&Tensor4> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor4 {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor4, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, value: Tensor4) -> NodeId {
        self.push(value, Op::Leaf(LeafKind::Input))
    }

    pub fn param(&mut self, index: usize, value: Tensor4) -> NodeId {
        self.push(value, Op::Leaf(LeafKind::Param(index)))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize) -> NodeId {
        let y = kernels::conv2d_forward(self.value(x), self.value(w), stride);
        self.push(y, Op::Conv2d { x, w, stride })
    }

    pub fn depthwise(&mut self, x: NodeId, w: NodeId, stride: usize) -> NodeId {
        let y = kernels::depthwise_forward(self.value(x), self.value(w), stride);
        self.push(y, Op::Depthwise { x, w, stride })
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let y = self.value(x) + self.value(b);
        self.push(y, Op::AddBias { x, b })
    }

    /// Channel normalization. With `stats = None` the batch statistics are
    /// computed here (training mode); otherwise the provided running
    /// `(mean, var)` are used and treated as constants. Returns the output
    /// node plus the batch statistics for the caller's running-average
    /// update.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        stats: Option<(&[f64], &[f64])>,
    ) -> (NodeId, Vec<f64>, Vec<f64>) {
        let xv = self.value(x);
        let (n, h, w, c) = xv.dim();
        let count = (n * h * w) as f64;

        let batch_stats = stats.is_none();
        let (mean, var): (Vec<f64>, Vec<f64>) = match stats {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => {
                let mut m = vec![0.0; c];
                let mut sq = vec![0.0; c];
                for v in xv.iter().enumerate() {
                    let ch = v.0 % c;
                    m[ch] += v.1;
                    sq[ch] += v.1 * v.1;
                }
                let m: Vec<f64> = m.into_iter().map(|s| s / count).collect();
                let var = sq
                    .into_iter()
                    .zip(&m)
                    .map(|(s, mu)| (s / count - mu * mu).max(0.0))
                    .collect();
                (m, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

        let gv = self.value(gamma).clone();
        let bv = self.value(beta).clone();
        let mut xhat = xv.clone();
        for (i, v) in xhat.iter_mut().enumerate() {
            let ch = i % c;
            *v = (*v - mean[ch]) * inv_std[ch];
        }
        let mut y = xhat.clone();
        for (i, v) in y.iter_mut().enumerate() {
            let ch = i % c;
            *v = *v * gv[(0, 0, 0, ch)] + bv[(0, 0, 0, ch)];
        }
        let id = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        );
        (id, mean, var)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).mapv(|v| v.max(0.0));
        self.push(y, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).mapv(sigmoid);
        self.push(y, Op::Sigmoid { x })
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).mapv(|v| v * sigmoid(v));
        self.push(y, Op::Silu { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let y = self.value(a) + self.value(b);
        self.push(y, Op::Add { a, b })
    }

    /// Multiply `x` (N,H,W,C) by a per-channel gate `s` (N,1,1,C).
    pub fn scale_channels(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let xv = self.value(x);
        let sv = self.value(s);
        let (n, h, w, c) = xv.dim();
        let mut y = xv.clone();
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    for ch in 0..c {
                        y[(ni, hi, wi, ch)] *= sv[(ni, 0, 0, ch)];
                    }
                }
            }
        }
        self.push(y, Op::ScaleChannels { x, s })
    }

    pub fn maxpool2(&mut self, x: NodeId) -> crate::Result<NodeId> {
        let (_, h, w, _) = self.value(x).dim();
        let (y, arg) = kernels::maxpool2_forward(self.value(x))?;
        Ok(self.push(
            y,
            Op::MaxPool2 {
                x,
                arg,
                in_h: h,
                in_w: w,
            },
        ))
    }

    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let (_, h, w, _) = self.value(x).dim();
        let y = kernels::upsample2_forward(self.value(x));
        self.push(
            y,
            Op::Upsample2 {
                x,
                in_h: h,
                in_w: w,
            },
        )
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        let (n, h, w, ca) = av.dim();
        let cb = bv.dim().3;
        assert_eq!((n, h, w), (bv.dim().0, bv.dim().1, bv.dim().2));
        let mut y = Array4::<f64>::zeros((n, h, w, ca + cb));
        y.slice_mut(ndarray::s![.., .., .., ..ca]).assign(av);
        y.slice_mut(ndarray::s![.., .., .., ca..]).assign(bv);
        self.push(y, Op::ConcatC { a, b, split: ca })
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (n, h, w, c) = xv.dim();
        let mut y = Array4::<f64>::zeros((n, 1, 1, c));
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    for ch in 0..c {
                        y[(ni, 0, 0, ch)] += xv[(ni, hi, wi, ch)];
                    }
                }
            }
        }
        y /= (h * w) as f64;
        self.push(
            y,
            Op::GlobalAvgPool {
                x,
                in_h: h,
                in_w: w,
            },
        )
    }

    /// Fully connected layer on pooled features: x (N,1,1,Ci), w (1,1,Ci,Co),
    /// b (1,1,1,Co).
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let (n, _, _, ci) = xv.dim();
        let co = wv.dim().3;
        let x2 = xv.view().into_shape((n, ci)).expect("x layout");
        let w2 = wv.view().into_shape((ci, co)).expect("w layout");
        let mut y2 = crate::kernels::conv::standardize2(x2.dot(&w2));
        for mut row in y2.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += bv[(0, 0, 0, j)];
            }
        }
        let y = y2.into_shape((n, 1, 1, co)).expect("y shape");
        self.push(y, Op::Dense { x, w, b })
    }

    /// Reverse pass from `seed` with the given upstream gradient.
    pub fn backward(&self, seed: NodeId, seed_grad: Tensor4) -> Gradients {
        let mut grads: Vec<Option<Tensor4>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(
            seed_grad.dim(),
            self.nodes[seed].value.dim(),
            "seed gradient shape"
        );
        grads[seed] = Some(seed_grad);

        for id in (0..self.nodes.len()).rev() {
            let dy = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Leaf(_) => {
                    grads[id] = Some(dy);
                    continue;
                }
                Op::Conv2d { x, w, stride } => {
                    let (dx, dw) =
                        kernels::conv2d_backward(self.value(*x), self.value(*w), *stride, &dy);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                }
                Op::Depthwise { x, w, stride } => {
                    let (dx, dw) =
                        kernels::depthwise_backward(self.value(*x), self.value(*w), *stride, &dy);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                }
                Op::AddBias { x, b } => {
                    let db = sum_over_nhw(&dy);
                    accumulate(&mut grads, *x, dy);
                    accumulate(&mut grads, *b, db);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let (n, h, w, c) = dy.dim();
                    let count = (n * h * w) as f64;
                    let gv = self.value(*gamma);

                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for (i, (g, xh)) in dy.iter().zip(xhat.iter()).enumerate() {
                        let ch = i % c;
                        dgamma[ch] += g * xh;
                        dbeta[ch] += g;
                    }

                    let mut dx = Array4::<f64>::zeros((n, h, w, c));
                    if *batch_stats {
                        // dxhat = dy * gamma; dx = inv_std * (dxhat - mean(dxhat)
                        //   - xhat * mean(dxhat * xhat)) with per-channel means.
                        let mut mean_dxhat = vec![0.0; c];
                        let mut mean_dxhat_xhat = vec![0.0; c];
                        for (i, (g, xh)) in dy.iter().zip(xhat.iter()).enumerate() {
                            let ch = i % c;
                            let dxh = g * gv[(0, 0, 0, ch)];
                            mean_dxhat[ch] += dxh;
                            mean_dxhat_xhat[ch] += dxh * xh;
                        }
                        for ch in 0..c {
                            mean_dxhat[ch] /= count;
                            mean_dxhat_xhat[ch] /= count;
                        }
                        for (i, v) in dx.iter_mut().enumerate() {
                            let ch = i % c;
                            let dxh = dy.as_slice().unwrap()[i] * gv[(0, 0, 0, ch)];
                            let xh = xhat.as_slice().unwrap()[i];
                            *v = inv_std[ch]
                                * (dxh - mean_dxhat[ch] - xh * mean_dxhat_xhat[ch]);
                        }
                    } else {
                        for (i, v) in dx.iter_mut().enumerate() {
                            let ch = i % c;
                            *v = dy.as_slice().unwrap()[i] * gv[(0, 0, 0, ch)] * inv_std[ch];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, crate::tensor::channel_vec(dgamma));
                    accumulate(&mut grads, *beta, crate::tensor::channel_vec(dbeta));
                }
                Op::Relu { x } => {
                    let mut dx = dy;
                    for (v, xv) in dx.iter_mut().zip(self.value(*x).iter()) {
                        if *xv <= 0.0 {
                            *v = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid { x } => {
                    let y = &self.nodes[id].value;
                    let mut dx = dy;
                    for (v, yv) in dx.iter_mut().zip(y.iter()) {
                        *v *= yv * (1.0 - yv);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Silu { x } => {
                    let mut dx = dy;
                    for (v, xv) in dx.iter_mut().zip(self.value(*x).iter()) {
                        let s = sigmoid(*xv);
                        *v *= s + xv * s * (1.0 - s);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, dy);
                }
                Op::ScaleChannels { x, s } => {
                    let xv = self.value(*x);
                    let sv = self.value(*s);
                    let (n, h, w, c) = xv.dim();
                    let mut dx = dy.clone();
                    let mut ds = Array4::<f64>::zeros((n, 1, 1, c));
                    for ni in 0..n {
                        for hi in 0..h {
                            for wi in 0..w {
                                for ch in 0..c {
                                    dx[(ni, hi, wi, ch)] *= sv[(ni, 0, 0, ch)];
                                    ds[(ni, 0, 0, ch)] +=
                                        dy[(ni, hi, wi, ch)] * xv[(ni, hi, wi, ch)];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *s, ds);
                }
                Op::MaxPool2 { x, arg, in_h, in_w } => {
                    let dx = kernels::maxpool2_backward(&dy, arg, *in_h, *in_w);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Upsample2 { x, in_h, in_w } => {
                    let dx = kernels::upsample2_backward(&dy, *in_h, *in_w);
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatC { a, b, split } => {
                    let da = dy.slice(ndarray::s![.., .., .., ..*split]).to_owned();
                    let db = dy.slice(ndarray::s![.., .., .., *split..]).to_owned();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::GlobalAvgPool { x, in_h, in_w } => {
                    let (n, _, _, c) = dy.dim();
                    let scale = 1.0 / ((*in_h * *in_w) as f64);
                    let mut dx = Array4::<f64>::zeros((n, *in_h, *in_w, c));
                    for ni in 0..n {
                        for hi in 0..*in_h {
                            for wi in 0..*in_w {
                                for ch in 0..c {
                                    dx[(ni, hi, wi, ch)] = dy[(ni, 0, 0, ch)] * scale;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Dense { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (n, _, _, ci) = xv.dim();
                    let co = wv.dim().3;
                    let dy2 = dy.view().into_shape((n, co)).expect("dy layout");
                    let x2 = xv.view().into_shape((n, ci)).expect("x layout");
                    let w2 = wv.view().into_shape((ci, co)).expect("w layout");

                    let dx2 = crate::kernels::conv::standardize2(dy2.dot(&w2.t()));
                    let dw2 = crate::kernels::conv::standardize2(x2.t().dot(&dy2));
                    let mut db = vec![0.0; co];
                    for row in dy2.rows() {
                        for (j, v) in row.iter().enumerate() {
                            db[j] += v;
                        }
                    }
                    accumulate(
                        &mut grads,
                        *x,
                        dx2.into_shape((n, 1, 1, ci)).expect("dx shape"),
                    );
                    accumulate(
                        &mut grads,
                        *w,
                        dw2.into_shape((1, 1, ci, co)).expect("dw shape"),
                    );
                    accumulate(&mut grads, *b, crate::tensor::channel_vec(db));
                }
            }
        }
        Gradients { grads }
    }

    /// Collect parameter gradients by store index after a backward pass.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<usize, Tensor4> {
        let mut out = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf(LeafKind::Param(idx)) = node.op {
                if let Some(g) = grads.grad(id) {
                    out.insert(idx, g.clone());
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Tensor4>], id: NodeId, g: Tensor4) {
    match &mut grads[id] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

fn sum_over_nhw(dy: &Tensor4) -> Tensor4 {
    let c = dy.dim().3;
    let mut db = vec![0.0; c];
    for (i, v) in dy.iter().enumerate() {
        db[i % c] += v;
    }
    crate::tensor::channel_vec(db)
}
