//! Training and evaluation lab for autoregressive and masked-diffusion
//! language models under a fixed unique-token budget.

pub mod data;
pub mod denoiser;
mod error;
pub mod eval;
pub mod experiment;
pub mod flops;
pub mod objectives;
pub mod samplers;
pub mod schedule;
pub mod tensor;
pub mod trainer;
pub mod transformer;

pub use error::{Error, Result};

/// Token id. Byte tokens occupy `0..256`; see [`data`] for the specials.
pub type Token = u32;
