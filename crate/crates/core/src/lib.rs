//! Self-supervised test-time fine-tuning for image inpainting.
//!
//! A pre-trained inpainting network first restores the masked input. The
//! restoration is then re-masked with fresh random masks and used as its own
//! training target, adapting the network to the patches that recur inside the
//! test image before the final restoration is produced.

pub mod adapt;
pub mod config;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod image;
pub mod io;
pub mod losses;
pub mod maskgen;
pub mod metrics;
pub mod network;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use image::{apply_mask, composite_output, compose_network_input, Image, InputStack, Mask, Transform};
pub use rng::RandomState;
