//! Balanced normalization of convolution weights.
//!
//! A balanced layer shifts and scales each output channel's kernel,
//! `w'' = s (w + b)`, so that on positive inputs the layer output has zero
//! mean and the positive and negative weights each contribute a total of
//! magnitude `r = batch * height_out * width_out * stride^2`. The crate
//! carries the small training stack needed to exercise it: double-precision
//! tensors and convolution, a reverse-mode tape, a batch-norm baseline,
//! SGD with schedules and mixup, data loading, metrics aggregation and an
//! invariant checker.

pub mod autodiff;
pub mod balnorm;
pub mod baselines;
pub mod check;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Whether a layer uses live batch statistics (and updates its running
/// estimates) or the frozen running estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}
