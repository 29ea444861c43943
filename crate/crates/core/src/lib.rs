pub mod data;
pub mod denoiser;
pub mod checkpoint;
pub mod cli;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod inference;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
