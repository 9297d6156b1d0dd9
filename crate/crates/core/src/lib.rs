pub mod cli;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evalkit;
pub mod guidance;
pub mod numerics;
pub mod optim;
pub mod rlaif;
pub mod rng;
pub mod scoring;
pub mod synth;

pub use error::{Error, Result};
