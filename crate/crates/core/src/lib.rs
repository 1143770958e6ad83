//! Pyramid hierarchical masked diffusion for paired image translation.

pub mod cgr;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod image;
pub mod masking;
pub mod metrics;
pub mod pipeline;
pub mod pyramid;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use image::Image;
