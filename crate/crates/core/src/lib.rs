//! Autoregressive geometry forecasting in a frozen latent space.
//!
//! The crate is generic over the floating-point element type through
//! [`numerics::Scalar`]; the aliases below pin the common instantiations.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod numerics;
pub mod rollout;
pub mod curriculum;
pub mod evalmetrics;
pub mod flowformer;
pub mod flowmatch;
pub mod toyworld;

pub use numerics::{Scalar, Tensor};

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
