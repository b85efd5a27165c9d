//! Video super-resolution with collaborative feedback discriminative
//! propagation.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense `(n, c, h, w)` tensors, kernels, and a gradient tape.
//! * [`flow`]: optical flow fields, `.flo` files, a Lucas–Kanade estimator.
//! * [`model`]: the network (alignment correction, bidirectional
//!   propagation, feedback ConvGRU, gated feed-forward blocks,
//!   reconstruction) and checkpoints.
//! * [`loss`] and [`optim`]: Charbonnier + FFT objective, Adam, cosine LR.
//! * [`data`]: frames, degradations, synthetic clips, patch sampling.
//! * [`metrics`]: PSNR, SSIM, temporal profiles, parameter and FLOP counts.
//! * [`train`], [`gradcheck`], [`config`]: the loops driven by the CLI.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    pub mod tensors {}
    #[doc = include_str!("../../../book/src/data.md")]
    pub mod data {}
    #[doc = include_str!("../../../book/src/flow.md")]
    pub mod flow {}
    #[doc = include_str!("../../../book/src/model.md")]
    pub mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
