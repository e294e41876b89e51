//! Distortion-aware building blocks for monocular depth estimation on
//! equirectangular panoramas.
//!
//! Every differentiable operation ships with a hand-written backward pass
//! that is checked against central finite differences ([`gradcheck`]).
//! The crate also contains a small encoder-decoder ([`model`]), a synthetic
//! RGB-D panorama renderer ([`synth`]) and an Adam-based trainer ([`train`])
//! so the whole pipeline can run without an external dataset.

pub mod ablation;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tensor2, Tensor4};
