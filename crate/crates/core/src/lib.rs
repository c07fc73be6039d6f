//! Searching encoder-decoder architectures that act as deep image priors.
//!
//! * [`tensor`]: double-precision reverse-mode autodiff with the operator set
//!   the search spaces need.
//! * [`genome`]: the joint search space (upsampling cell + shared
//!   cross-level connection pattern).
//! * [`generator`]: builds and runs a network from a genome.
//! * [`dip`]: single-image fitting against a degraded observation.
//! * [`controller`]: recurrent policy trained with REINFORCE on PSNR reward.

pub mod controller;
pub mod dip;
pub mod error;
pub mod generator;
pub mod genome;
pub mod tensor;

pub use error::{Error, Result};
