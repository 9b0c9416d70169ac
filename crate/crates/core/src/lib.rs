//! Core algorithms for text- and MR-conditional latent diffusion on synthetic
//! tau-PET phantoms.
//!
//! Everything in this crate is a pure function of its inputs and seeds. It is
//! `no_std` (with `alloc`); enable the `std` feature for runtime SIMD dispatch
//! in the matrix kernels. File formats, checkpoints, and the command line live
//! in the companion `taugen` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autoencoder;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod image;
pub mod nn;
pub mod phantom;
pub mod prompt;
pub mod real;
pub mod sampler;
pub mod schedule;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use image::{Image2D, Modality};
pub use prompt::{ConditionVector, PromptSpec};
pub use real::Real;
pub use schedule::NoiseSchedule;
pub use tensor::Tensor;
