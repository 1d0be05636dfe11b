pub mod datagen;
pub mod denoiser;
pub mod detector;
pub mod diffusion;
pub mod evalbench;
pub mod experiment;
pub mod error;
pub mod forensics;
pub mod numerics;
pub mod pipeline;

pub use error::{Error, Result};
