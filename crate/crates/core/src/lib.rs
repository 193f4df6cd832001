//! Intensity-aware single-image dehazing.
//!
//! The crate is organised bottom-up:
//!
//! * [`numcore`]: dense tensors, differentiable primitives and a define-by-run
//!   reverse-mode tape.
//! * [`prior`]: the degradation prior: a close-set softmax over rating levels,
//!   fed by a pluggable haze-intensity estimator.
//! * [`ssm`]: selective scan, four-directional 2-D scanning and the state space
//!   block.
//! * [`moe`]: top-K expert routing and the MoE-SSM block.
//! * [`model`]: the encoder-decoder network, its configuration and checkpoints.
//! * [`hazegen`]: atmospheric-scattering haze synthesis and dataset generation.
//! * [`metrics`]: PSNR, SSIM and the Charbonnier objective.
//! * [`harness`]: optimizer, schedule, training/evaluation loops and the CLI.

pub mod error;
pub mod harness;
pub mod hazegen;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod numcore;
pub mod prior;
pub mod ssm;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use numcore::{Graph, ParamId, ParamStore, Precision, Scalar, Tensor, Var};
