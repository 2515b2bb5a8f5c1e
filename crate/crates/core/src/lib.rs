//! Two-stage skin lesion analysis pipeline.
//!
//! Stage one segments the lesion with an encoder-decoder network, the
//! predicted mask is multiplied with the image to extract a region of
//! interest, and stage two classifies the ROI into one of seven lesion
//! classes. Everything runs on a small f64 tape-autodiff engine so that
//! training is bit-deterministic and gradients can be checked against
//! finite differences.

pub mod augment;
pub mod backbone;
pub mod blocks;
pub mod cascade;
pub mod checkpoint;
pub mod clsmodel;
pub mod dataio;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod parallel;
pub mod segmodel;
pub mod synthgen;
pub mod tensor;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
pub use tensor::Tensor4;
