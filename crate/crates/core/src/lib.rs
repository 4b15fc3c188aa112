//! Radiance fields conditioned on diffusion-denoised view features and
//! aggregated by self-attention, trained jointly on synthetic scenes.

// `!(x > 0.0)` is how NaN gets rejected throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diffusion;
pub mod error;
pub mod geom;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod renderer;
pub mod scene;
pub mod transformer;

pub use error::{Error, Result};
