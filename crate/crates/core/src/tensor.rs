//! Tensor conventions and serialization helpers.
//!
//! All activations and parameters are rank-4 `f64` arrays in NHWC layout:
//! images are `(batch, height, width, channels)`, convolution weights are
//! `(k, k, in_channels, out_channels)`, per-channel vectors such as biases
//! are `(1, 1, 1, channels)`.

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Tensor4 = Array4<f64>;

/// Flat serialized form of a [`Tensor4`], used by checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorData {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl TensorData {
    pub fn from_tensor(t: &Tensor4) -> Self {
        let (a, b, c, d) = t.dim();
        TensorData {
            shape: [a, b, c, d],
            data: t.iter().copied().collect(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor4> {
        let [a, b, c, d] = self.shape;
        Array4::from_shape_vec((a, b, c, d), self.data.clone())
            .map_err(|e| Error::Checkpoint(format!("bad tensor shape {:?}: {e}", self.shape)))
    }
}

/// Shape string for error messages, e.g. "(2, 64, 64, 16)".
pub fn shape_str(t: &Tensor4) -> String {
    let (a, b, c, d) = t.dim();
    format!("({a}, {b}, {c}, {d})")
}

/// Per-channel vector as a broadcastable `(1,1,1,C)` tensor.
pub fn channel_vec(values: Vec<f64>) -> Tensor4 {
    let c = values.len();
    Array4::from_shape_vec((1, 1, 1, c), values).expect("channel vec shape")
}
