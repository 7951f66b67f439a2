//! Communal-domain metric learning for registering volumes whose intensity
//! distributions have drifted apart (different sequences or modalities).
//!
//! A small fully connected network is trained on aligned pairs so that its
//! outputs for the two domains are maximally correlated and have matching
//! means. The trained network then acts as a similarity metric for affine
//! registration, with analytic derivatives all the way from the metric back to
//! the transform parameters.
//!
//! The crate is `no_std` and needs only `alloc`. File formats, the command-line
//! driver and the experiment harness live in the `cdl` crate.

#![no_std]
#![allow(clippy::needless_range_loop)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod bspline;
pub mod density;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod matrix;
pub mod network;
pub mod registration;
pub mod rng;
pub mod synthetic;
pub mod transform;
pub mod volume;

mod math;

pub use error::{Error, Result};
