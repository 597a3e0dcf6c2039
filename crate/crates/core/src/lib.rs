//! Diffusion-model signal detection over known linear channels, with
//! classical ML/MMSE/ZF/MF baselines and a seeded Monte-Carlo SER harness.

pub mod channel;
pub mod classical;
pub mod denoiser;
pub mod detector_dm;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod modem;
pub mod numerics;

pub use error::{Error, Result};
