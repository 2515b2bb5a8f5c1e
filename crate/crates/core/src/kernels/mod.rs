//! Low-level numerical kernels behind the autodiff graph.
//!
//! Each kernel has a forward and a backward entry point. Loops over the
//! batch axis run under rayon when [`crate::parallel::parallel_enabled`]
//! is true; every thread writes a disjoint output slice and accumulates
//! in a fixed order, so outputs are identical to the sequential path.

pub(crate) mod conv;
mod pool;
mod resample;

pub use conv::{
    conv2d_backward, conv2d_forward, conv_out_dim, depthwise_backward, depthwise_forward,
};
pub use pool::{maxpool2_backward, maxpool2_forward};
pub use resample::{resize_bilinear, resize_nearest, upsample2_backward, upsample2_forward};
