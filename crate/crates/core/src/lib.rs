//! Masked-diffusion temporal action localization.
//!
//! Boundary-aware corruption, step-weighted reconstruction, a gated
//! step-level soft-IoU objective, confidence-based reverse denoising and the
//! usual TAL evaluation protocol, on synthetic feature-sequence videos with a
//! small bidirectional denoiser trained from scratch.

pub mod checkpoint;
pub mod corruption;
pub mod denoiser;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod sampler;
pub mod synthgen;
pub mod timecodec;
pub mod trainkit;

pub use error::{Error, Result};
